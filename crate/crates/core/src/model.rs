//! Full StepNet assembly: backbone, spatial and temporal branches, fusion MLP
//! and the per-feature classifiers.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::{total_loss_on_tape, Classifier, Head, LogitBundle};
use crate::params::{Binding, ParamStore};
use crate::spatial::{SpatialBranch, SpatialConfig};
use crate::temporal::{BranchFusion, TemporalBranch, TemporalConfig};
use crate::tensor::{Real, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` removes the spatial branch and its part heads.
    pub spatial: Option<SpatialConfig>,
    /// `None` removes the temporal branch.
    pub temporal: Option<TemporalConfig>,
    /// Width of `f_st`.
    pub fuse_width: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Every width derived from the backbone channel count `C`.
    pub fn from_backbone(backbone: BackboneConfig, num_classes: usize) -> Self {
        let c = backbone.out_channels();
        ModelConfig {
            spatial: Some(SpatialConfig::for_channels(c)),
            temporal: Some(TemporalConfig::for_channels(c)),
            fuse_width: c,
            num_classes,
            backbone,
        }
    }

    /// Desk-scale model: 3-block shift CNN to 32 channels on a 4×4 grid.
    pub fn desk(in_channels: usize, num_classes: usize) -> Self {
        Self::from_backbone(BackboneConfig::desk(in_channels), num_classes)
    }

    /// Full-scale dimensions (C = 2048, 16×16 grid, d = 1024).
    pub fn full_scale(in_channels: usize, num_classes: usize) -> Self {
        Self::from_backbone(BackboneConfig::full_scale(in_channels), num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(s) = &self.spatial {
            s.validate()?;
        }
        if let Some(t) = &self.temporal {
            t.validate()?;
        }
        if self.num_classes == 0 || self.fuse_width == 0 {
            return Err(Error::Config("class count and fuse width must be positive".into()));
        }
        Ok(())
    }

    /// Heads this configuration trains, in objective order.
    pub fn heads(&self) -> Vec<Head> {
        let mut heads = Vec::new();
        if let Some(s) = &self.spatial {
            if s.partitions.left_right {
                heads.extend([Head::Left, Head::Right]);
            }
            if s.partitions.top_bottom {
                heads.extend([Head::Top, Head::Bottom]);
            }
            if s.partitions.left_right {
                heads.push(Head::LeftRight);
            }
            if s.partitions.top_bottom {
                heads.push(Head::TopBottom);
            }
        }
        heads.push(Head::Global);
        if self.spatial.is_some() {
            heads.push(Head::Spatial);
        }
        if self.temporal.is_some() {
            heads.push(Head::Temporal);
        }
        if self.spatial.is_some() || self.temporal.is_some() {
            heads.push(Head::Fused);
        }
        heads.sort();
        heads
    }
}

/// Every named tensor of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `(name, var)` in a fixed order: `M`, spatial, temporal, `f_st`.
    pub features: Vec<(String, Var)>,
    pub logits: Vec<(Head, Var)>,
}

impl Forward {
    pub fn feature(&self, name: &str) -> Option<Var> {
        self.features.iter().find(|f| f.0 == name).map(|f| f.1)
    }

    pub fn logit(&self, head: Head) -> Option<Var> {
        self.logits.iter().find(|l| l.0 == head).map(|l| l.1)
    }

    /// Reads logits off a numeric tape.
    pub fn bundle<F: Real>(&self, tape: &Tape<F>) -> Result<LogitBundle> {
        LogitBundle::new(
            self.logits
                .iter()
                .map(|&(h, v)| (h, tape.data(v).iter().map(|x| x.f64()).collect()))
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct StepNet {
    cfg: ModelConfig,
    backbone: Backbone,
    spatial: Option<SpatialBranch>,
    temporal: Option<TemporalBranch>,
    fusion: Option<BranchFusion>,
    heads: Vec<(Head, Classifier)>,
}

impl StepNet {
    /// Registers all parameters in `store` and returns the model.
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.backbone.out_channels();
        let backbone = Backbone::new(store, &cfg.backbone)?;
        let spatial = cfg
            .spatial
            .as_ref()
            .map(|s| SpatialBranch::new(store, c, s))
            .transpose()?;
        let temporal = cfg
            .temporal
            .as_ref()
            .map(|t| TemporalBranch::new(store, c, t))
            .transpose()?;
        let fuse_in = spatial.as_ref().map_or(0, |s| s.out_width()) + temporal.as_ref().map_or(0, |t| t.out_width());
        let fusion = (fuse_in > 0).then(|| BranchFusion::new(store, fuse_in, cfg.fuse_width));
        let heads = cfg
            .heads()
            .into_iter()
            .map(|h| {
                let width = match h {
                    Head::Spatial => cfg.spatial.as_ref().map_or(c, |s| s.attn_width),
                    Head::Temporal => cfg.temporal.as_ref().map_or(c, |t| t.attn_width),
                    Head::Fused => cfg.fuse_width,
                    _ => c,
                };
                (h, Classifier::new(store, h, width, cfg.num_classes))
            })
            .collect();
        Ok(StepNet {
            cfg: cfg.clone(),
            backbone,
            spatial,
            temporal,
            fusion,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn spatial(&self) -> Option<&SpatialBranch> {
        self.spatial.as_ref()
    }

    pub fn temporal(&self) -> Option<&TemporalBranch> {
        self.temporal.as_ref()
    }

    fn classify<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, head: Head, x: Var) -> Result<(Head, Var)> {
        let (_, clf) = self
            .heads
            .iter()
            .find(|(h, _)| *h == head)
            .ok_or_else(|| Error::invalid("classify", format!("model has no {head} head")))?;
        Ok((head, clf.forward(tape, p, x)?))
    }

    /// Runs `clip: T×C_in×H×W` through the whole network.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, clip: Var) -> Result<Forward> {
        let m = self.backbone.forward(tape, p, clip)?;
        let mut features = vec![("M".to_string(), m)];
        let mut logits = Vec::new();
        let mut branch_out = Vec::new();

        match &self.spatial {
            Some(sp) => {
                let s = sp.forward(tape, p, m)?;
                features.push(("g_sg".into(), s.parts.global));
                if s.g_lr.is_some() {
                    features.push(("h_l".into(), s.parts.left));
                    features.push(("h_r".into(), s.parts.right));
                }
                if s.g_tb.is_some() {
                    features.push(("h_t".into(), s.parts.top));
                    features.push(("h_b".into(), s.parts.bottom));
                }
                if let Some(g) = s.g_lr {
                    features.push(("g_lr".into(), g));
                    logits.push(self.classify(tape, p, Head::Left, s.parts.left)?);
                    logits.push(self.classify(tape, p, Head::Right, s.parts.right)?);
                    logits.push(self.classify(tape, p, Head::LeftRight, g)?);
                }
                if let Some(g) = s.g_tb {
                    features.push(("g_tb".into(), g));
                    logits.push(self.classify(tape, p, Head::Top, s.parts.top)?);
                    logits.push(self.classify(tape, p, Head::Bottom, s.parts.bottom)?);
                    logits.push(self.classify(tape, p, Head::TopBottom, g)?);
                }
                features.push(("f_s".into(), s.f_s));
                logits.push(self.classify(tape, p, Head::Global, s.parts.global)?);
                logits.push(self.classify(tape, p, Head::Spatial, s.f_s)?);
                branch_out.push(s.f_s);
            }
            None => {
                let g_sg = tape.mean(m, &[2, 3])?;
                features.push(("g_sg".into(), g_sg));
                logits.push(self.classify(tape, p, Head::Global, g_sg)?);
            }
        }

        if let Some(tb) = &self.temporal {
            let t = tb.forward(tape, p, m)?;
            for (i, &g) in t.encoded.iter().enumerate() {
                features.push((format!("g_{}", i + 1), g));
            }
            features.push(("g_t".into(), t.global));
            features.push(("f_t".into(), t.f_t));
            logits.push(self.classify(tape, p, Head::Temporal, t.f_t)?);
            branch_out.push(t.f_t);
        }

        if let Some(fusion) = &self.fusion {
            let f_st = fusion.forward(tape, p, &branch_out)?;
            features.push(("f_st".into(), f_st));
            logits.push(self.classify(tape, p, Head::Fused, f_st)?);
        }
        logits.sort_by_key(|l| l.0);
        Ok(Forward { features, logits })
    }

    /// Forward pass followed by the accumulated objective.
    pub fn loss<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, clip: Var, label: usize) -> Result<(Forward, Var)> {
        let fwd = self.forward(tape, p, clip)?;
        let loss = total_loss_on_tape(tape, &fwd.logits, label)?;
        Ok((fwd, loss))
    }
}
