//! Part-level spatial modeling.
//!
//! The feature map is pooled globally and over left/right and top/bottom
//! stripes. Part features are rescaled by learned gates and summed per
//! partition, then attended to from the global feature:
//!
//! ```text
//! G(h)  = h ⊙ σ(MLP(h))
//! g_lr  = G_left(h_l) + G_right(h_r)
//! g_tb  = G_top(h_t)  + G_bottom(h_b)
//! f_s   = softmax(Q_s K_pᵀ) V_p + V_s,   K_p = [K_lr; K_tb], V_p = [V_lr; V_tb]
//! ```
//!
//! Scores are not scaled by `1/√d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Real, Tape, Var};

/// Which stripe partitions feed the branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partitions {
    pub left_right: bool,
    pub top_bottom: bool,
}

impl Partitions {
    pub const BOTH: Partitions = Partitions {
        left_right: true,
        top_bottom: true,
    };
}

/// How part features are merged into the global one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartFusion {
    Attention,
    /// Width-wise concatenation of `[g_sg, g_lr, g_tb]` followed by an affine map.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub partitions: Partitions,
    pub fusion: PartFusion,
    /// Width `d` of keys, queries and values.
    pub attn_width: usize,
    /// Hidden width of each gate MLP.
    pub gate_hidden: usize,
}

impl SpatialConfig {
    /// Defaults derived from the backbone width: `d = C/2`, gate hidden `C/4`.
    pub fn for_channels(c: usize) -> Self {
        SpatialConfig {
            partitions: Partitions::BOTH,
            fusion: PartFusion::Attention,
            attn_width: (c / 2).max(1),
            gate_hidden: (c / 4).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.partitions.left_right && !self.partitions.top_bottom {
            return Err(Error::Config("spatial branch needs at least one partition".into()));
        }
        if self.attn_width == 0 || self.gate_hidden == 0 {
            return Err(Error::Config("spatial widths must be positive".into()));
        }
        Ok(())
    }
}

/// Global and stripe-pooled features, each `T×C`.
#[derive(Debug, Clone, Copy)]
pub struct SpatialParts {
    pub global: Var,
    pub left: Var,
    pub right: Var,
    pub top: Var,
    pub bottom: Var,
}

/// Pools `m: T×C×H×W` globally and over the two halves of each spatial axis.
/// With an odd extent the first stripe (left / top) takes the extra column / row.
pub fn spatial_partition<F: Real>(tape: &mut Tape<F>, m: Var) -> Result<SpatialParts> {
    let shape = tape.shape(m).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(
            "spatial_partition",
            format!("expected T×C×H×W, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[2], shape[3]);
    if h < 2 || w < 2 {
        return Err(Error::invalid(
            "spatial_partition",
            format!("{h}x{w} map is too small to split into stripes"),
        ));
    }
    let global = tape.mean(m, &[2, 3])?;
    let (wl, hl) = (w.div_ceil(2), h.div_ceil(2));
    let stripe = |tape: &mut Tape<F>, axis: usize, start: usize, len: usize| -> Result<Var> {
        let s = tape.narrow(m, axis, start, len)?;
        tape.mean(s, &[2, 3])
    };
    Ok(SpatialParts {
        global,
        left: stripe(tape, 3, 0, wl)?,
        right: stripe(tape, 3, wl, w - wl)?,
        top: stripe(tape, 2, 0, hl)?,
        bottom: stripe(tape, 2, hl, h - hl)?,
    })
}

/// `h ⊙ σ(MLP(h))` applied row by row.
#[derive(Debug, Clone)]
pub struct Gate {
    pub mlp: Mlp,
}

impl Gate {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, hidden: usize) -> Self {
        Gate {
            mlp: Mlp::new(store, name, channels, hidden, channels),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, h: Var) -> Result<Var> {
        let logits = self.mlp.forward(tape, p, h)?;
        let s = tape.sigmoid(logits)?;
        tape.mul(h, s)
    }
}

/// Four independent gates.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub left: Gate,
    pub right: Gate,
    pub top: Gate,
    pub bottom: Gate,
}

/// `(g_lr, g_tb)` from gated stripe features.
pub fn fuse_gated<F: Real>(
    tape: &mut Tape<F>,
    p: &Binding,
    parts: &SpatialParts,
    gates: &GateParams,
) -> Result<(Var, Var)> {
    let l = gates.left.forward(tape, p, parts.left)?;
    let r = gates.right.forward(tape, p, parts.right)?;
    let t = gates.top.forward(tape, p, parts.top)?;
    let b = gates.bottom.forward(tape, p, parts.bottom)?;
    Ok((tape.add(l, r)?, tape.add(t, b)?))
}

/// Key/value projections of one part source.
#[derive(Debug, Clone)]
pub struct KeyValue {
    pub key: Linear,
    pub value: Linear,
}

impl KeyValue {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d_in: usize, d: usize) -> Self {
        KeyValue {
            key: Linear::new(store, &format!("{name}.key"), d_in, d),
            value: Linear::new(store, &format!("{name}.value"), d_in, d),
        }
    }
}

/// Output of one attention read.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOut {
    pub output: Var,
    /// Row-stochastic attention matrix.
    pub weights: Var,
}

/// `softmax(q·keysᵀ)·values + residual`; keys and values stacked by rows.
pub fn attend<F: Real>(
    tape: &mut Tape<F>,
    query: Var,
    keys: &[Var],
    values: &[Var],
    residual: Var,
) -> Result<AttentionOut> {
    let k = tape.concat(keys, 0)?;
    let v = tape.concat(values, 0)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(query, kt)?;
    let weights = tape.softmax_rows(scores)?;
    let read = tape.matmul(weights, v)?;
    Ok(AttentionOut {
        output: tape.add(read, residual)?,
        weights,
    })
}

/// Projections used by [`spatial_attention`].
#[derive(Debug, Clone)]
pub struct SpatialAttentionParams {
    pub lr: KeyValue,
    pub tb: KeyValue,
    pub query: Linear,
    pub value: Linear,
}

/// `f_s = softmax(Q_s [K_lr; K_tb]ᵀ) [V_lr; V_tb] + V_s`.
pub fn spatial_attention<F: Real>(
    tape: &mut Tape<F>,
    p: &Binding,
    g_sg: Var,
    g_lr: Var,
    g_tb: Var,
    params: &SpatialAttentionParams,
) -> Result<AttentionOut> {
    let q = params.query.forward(tape, p, g_sg)?;
    let vs = params.value.forward(tape, p, g_sg)?;
    let k_lr = params.lr.key.forward(tape, p, g_lr)?;
    let v_lr = params.lr.value.forward(tape, p, g_lr)?;
    let k_tb = params.tb.key.forward(tape, p, g_tb)?;
    let v_tb = params.tb.value.forward(tape, p, g_tb)?;
    attend(tape, q, &[k_lr, k_tb], &[v_lr, v_tb], vs)
}

/// Intermediate and output tensors of the spatial branch.
#[derive(Debug, Clone)]
pub struct SpatialFeatures {
    pub parts: SpatialParts,
    pub g_lr: Option<Var>,
    pub g_tb: Option<Var>,
    pub f_s: Var,
    pub attention: Option<Var>,
}

#[derive(Debug, Clone)]
enum Merge {
    Attention {
        lr: Option<KeyValue>,
        tb: Option<KeyValue>,
        query: Linear,
        value: Linear,
    },
    Concat(Linear),
}

#[derive(Debug, Clone)]
pub struct SpatialBranch {
    cfg: SpatialConfig,
    left: Option<(Gate, Gate)>,
    top: Option<(Gate, Gate)>,
    merge: Merge,
}

impl SpatialBranch {
    pub fn new<F: Real>(store: &mut ParamStore<F>, channels: usize, cfg: &SpatialConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, hid, d) = (channels, cfg.gate_hidden, cfg.attn_width);
        let pair = |store: &mut ParamStore<F>, a: &str, b: &str| {
            (
                Gate::new(store, &format!("spatial.gate_{a}"), c, hid),
                Gate::new(store, &format!("spatial.gate_{b}"), c, hid),
            )
        };
        let left = cfg.partitions.left_right.then(|| pair(store, "left", "right"));
        let top = cfg.partitions.top_bottom.then(|| pair(store, "top", "bottom"));
        let merge = match cfg.fusion {
            PartFusion::Attention => Merge::Attention {
                lr: cfg
                    .partitions
                    .left_right
                    .then(|| KeyValue::new(store, "spatial.lr", c, d)),
                tb: cfg
                    .partitions
                    .top_bottom
                    .then(|| KeyValue::new(store, "spatial.tb", c, d)),
                query: Linear::new(store, "spatial.query", c, d),
                value: Linear::new(store, "spatial.value", c, d),
            },
            PartFusion::Concat => {
                let n = 1 + cfg.partitions.left_right as usize + cfg.partitions.top_bottom as usize;
                Merge::Concat(Linear::new(store, "spatial.concat", n * c, d))
            }
        };
        Ok(SpatialBranch {
            cfg: cfg.clone(),
            left,
            top,
            merge,
        })
    }

    pub fn config(&self) -> &SpatialConfig {
        &self.cfg
    }

    pub fn out_width(&self) -> usize {
        self.cfg.attn_width
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, m: Var) -> Result<SpatialFeatures> {
        let parts = spatial_partition(tape, m)?;
        let gated = |tape: &mut Tape<F>, gates: &Option<(Gate, Gate)>, a: Var, b: Var| {
            gates
                .as_ref()
                .map(|(ga, gb)| -> Result<Var> {
                    let x = ga.forward(tape, p, a)?;
                    let y = gb.forward(tape, p, b)?;
                    tape.add(x, y)
                })
                .transpose()
        };
        let g_lr = gated(tape, &self.left, parts.left, parts.right)?;
        let g_tb = gated(tape, &self.top, parts.top, parts.bottom)?;
        let (f_s, attention) = match &self.merge {
            Merge::Attention { lr, tb, query, value } => {
                let q = query.forward(tape, p, parts.global)?;
                let vs = value.forward(tape, p, parts.global)?;
                let mut keys = Vec::new();
                let mut values = Vec::new();
                for (kv, g) in [(lr, g_lr), (tb, g_tb)] {
                    if let (Some(kv), Some(g)) = (kv, g) {
                        keys.push(kv.key.forward(tape, p, g)?);
                        values.push(kv.value.forward(tape, p, g)?);
                    }
                }
                let out = attend(tape, q, &keys, &values, vs)?;
                (out.output, Some(out.weights))
            }
            Merge::Concat(lin) => {
                let mut cols = vec![parts.global];
                cols.extend(g_lr);
                cols.extend(g_tb);
                let cat = tape.concat(&cols, 1)?;
                (lin.forward(tape, p, cat)?, None)
            }
        };
        Ok(SpatialFeatures {
            parts,
            g_lr,
            g_tb,
            f_s,
            attention,
        })
    }
}
