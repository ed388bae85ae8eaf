//! Part-level temporal modeling: spatially pooled features are cut into
//! overlapping segments, each encoded by its own GRU, and a global GRU over
//! the whole clip attends to the segment encodings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gru, Linear, Mlp};
use crate::params::{Binding, ParamStore};
use crate::spatial::{attend, KeyValue};
use crate::tensor::{Real, Tape, Var};

/// Start frames of `N` equal-length windows spread evenly over `T` frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub frames: usize,
    pub len: usize,
    pub starts: Vec<usize>,
}

impl SegmentPlan {
    pub fn count(&self) -> usize {
        self.starts.len()
    }

    /// Frames shared by consecutive windows (0 when they do not overlap).
    pub fn overlaps(&self) -> Vec<usize> {
        self.starts
            .windows(2)
            .map(|w| (w[0] + self.len).saturating_sub(w[1]))
            .collect()
    }
}

/// `starts[i] = round(i·(T−L)/(N−1))`, rounding halves up.
pub fn plan_segments(frames: usize, count: usize, len: usize) -> Result<SegmentPlan> {
    let fail = |m: String| Err(Error::invalid("plan_segments", m));
    if count == 0 || len == 0 {
        return fail(format!("need at least one non-empty segment, got N={count}, L={len}"));
    }
    if len > frames {
        return fail(format!("segment length {len} exceeds {frames} frames"));
    }
    if count == 1 {
        if len != frames {
            return fail(format!("a single segment must span all {frames} frames, got L={len}"));
        }
        return Ok(SegmentPlan {
            frames,
            len,
            starts: vec![0],
        });
    }
    let span = frames - len;
    let gaps = count - 1;
    let starts: Vec<usize> = (0..count).map(|i| (2 * i * span + gaps) / (2 * gaps)).collect();
    if starts.windows(2).any(|w| w[1] <= w[0]) {
        return fail(format!(
            "{count} segments of {len} frames cannot have distinct starts within {frames} frames"
        ));
    }
    Ok(SegmentPlan { frames, len, starts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub segments: usize,
    pub segment_len: usize,
    /// When false, segments and the pooled sequence feed attention directly.
    pub use_grus: bool,
    pub segment_hidden: usize,
    pub global_hidden: usize,
    pub attn_width: usize,
}

impl TemporalConfig {
    /// `N = 3`, `L = 8`, hidden sizes `C/2` (segments) and `C` (global), `d = C/2`.
    pub fn for_channels(c: usize) -> Self {
        TemporalConfig {
            segments: 3,
            segment_len: 8,
            use_grus: true,
            segment_hidden: (c / 2).max(1),
            global_hidden: c,
            attn_width: (c / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.segment_len == 0 {
            return Err(Error::Config("temporal segments must be non-empty".into()));
        }
        if self.segment_hidden == 0 || self.global_hidden == 0 || self.attn_width == 0 {
            return Err(Error::Config("temporal widths must be positive".into()));
        }
        Ok(())
    }
}

/// Intermediate and output tensors of the temporal branch.
#[derive(Debug, Clone)]
pub struct TemporalFeatures {
    pub pooled: Var,
    pub plan: SegmentPlan,
    pub segments: Vec<Var>,
    /// `g_1..g_N`, each `L×d_seg`.
    pub encoded: Vec<Var>,
    /// `g_t`, `T×d_glob`.
    pub global: Var,
    pub f_t: Var,
    pub attention: Var,
}

/// `M: T×C×H×W → T×C` by averaging each frame's spatial grid.
pub fn temporal_pool<F: Real>(tape: &mut Tape<F>, m: Var) -> Result<Var> {
    tape.mean(m, &[2, 3])
}

#[derive(Debug, Clone)]
pub struct TemporalBranch {
    cfg: TemporalConfig,
    segment_grus: Vec<Gru>,
    global_gru: Option<Gru>,
    /// Shared key/value projection applied to every segment encoding.
    segment_kv: KeyValue,
    query: Linear,
    value: Linear,
}

impl TemporalBranch {
    pub fn new<F: Real>(store: &mut ParamStore<F>, channels: usize, cfg: &TemporalConfig) -> Result<Self> {
        cfg.validate()?;
        let (seg_w, glob_w) = if cfg.use_grus {
            (cfg.segment_hidden, cfg.global_hidden)
        } else {
            (channels, channels)
        };
        let segment_grus = if cfg.use_grus {
            (0..cfg.segments)
                .map(|i| Gru::new(store, &format!("temporal.gru{i}"), channels, cfg.segment_hidden))
                .collect()
        } else {
            Vec::new()
        };
        let global_gru = cfg
            .use_grus
            .then(|| Gru::new(store, "temporal.gru_global", channels, cfg.global_hidden));
        let d = cfg.attn_width;
        Ok(TemporalBranch {
            cfg: cfg.clone(),
            segment_grus,
            global_gru,
            segment_kv: KeyValue::new(store, "temporal.segments", seg_w, d),
            query: Linear::new(store, "temporal.query", glob_w, d),
            value: Linear::new(store, "temporal.value", glob_w, d),
        })
    }

    pub fn config(&self) -> &TemporalConfig {
        &self.cfg
    }

    pub fn out_width(&self) -> usize {
        self.cfg.attn_width
    }

    pub fn segment_grus(&self) -> &[Gru] {
        &self.segment_grus
    }

    /// Encodes each planned segment with its own GRU and the full sequence
    /// with the global GRU; returns `(g_1..g_N, g_t)`.
    pub fn run_grus<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &Binding,
        pooled: Var,
        plan: &SegmentPlan,
    ) -> Result<(Vec<Var>, Vec<Var>, Var)> {
        let t = tape.shape(pooled)[0];
        if t != plan.frames {
            return Err(Error::invalid(
                "run_grus",
                format!("plan covers {} frames, sequence has {t}", plan.frames),
            ));
        }
        let segments = plan
            .starts
            .iter()
            .map(|&s| tape.narrow(pooled, 0, s, plan.len))
            .collect::<Result<Vec<_>>>()?;
        let (encoded, global) = match &self.global_gru {
            Some(global_gru) => {
                let enc = segments
                    .iter()
                    .zip(&self.segment_grus)
                    .map(|(&s, gru)| gru.sequence(tape, p, s))
                    .collect::<Result<Vec<_>>>()?;
                (enc, global_gru.sequence(tape, p, pooled)?)
            }
            None => (segments.clone(), pooled),
        };
        Ok((segments, encoded, global))
    }

    /// `f_t = softmax(Q_t K'_pᵀ) V'_p + V_t`, keys/values stacked in segment order.
    pub fn temporal_attention<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &Binding,
        global: Var,
        encoded: &[Var],
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(tape, p, global)?;
        let vt = self.value.forward(tape, p, global)?;
        let mut keys = Vec::with_capacity(encoded.len());
        let mut values = Vec::with_capacity(encoded.len());
        for &g in encoded {
            keys.push(self.segment_kv.key.forward(tape, p, g)?);
            values.push(self.segment_kv.value.forward(tape, p, g)?);
        }
        let out = attend(tape, q, &keys, &values, vt)?;
        Ok((out.output, out.weights))
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, m: Var) -> Result<TemporalFeatures> {
        let pooled = temporal_pool(tape, m)?;
        let t = tape.shape(pooled)[0];
        if self.cfg.segments != self.segment_grus.len() && self.cfg.use_grus {
            return Err(Error::Config("segment GRU count does not match config".into()));
        }
        let plan = plan_segments(t, self.cfg.segments, self.cfg.segment_len)?;
        let (segments, encoded, global) = self.run_grus(tape, p, pooled, &plan)?;
        let (f_t, attention) = self.temporal_attention(tape, p, global, &encoded)?;
        Ok(TemporalFeatures {
            pooled,
            plan,
            segments,
            encoded,
            global,
            f_t,
            attention,
        })
    }
}

/// `f_st = MLP([f_s | f_t])` with a ReLU hidden layer as wide as its input.
#[derive(Debug, Clone)]
pub struct BranchFusion {
    pub mlp: Mlp,
}

impl BranchFusion {
    pub fn new<F: Real>(store: &mut ParamStore<F>, d_in: usize, d_out: usize) -> Self {
        BranchFusion {
            mlp: Mlp::new(store, "fuse", d_in, d_in, d_out),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, inputs: &[Var]) -> Result<Var> {
        let rows: Vec<usize> = inputs.iter().map(|&v| tape.shape(v)[0]).collect();
        if rows.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::invalid(
                "fuse_branches",
                format!("branch features disagree on frame count: {rows:?}"),
            ));
        }
        let x = if inputs.len() == 1 {
            inputs[0]
        } else {
            tape.concat(inputs, 1)?
        };
        self.mlp.forward(tape, p, x)
    }
}
