//! Run configuration: one JSON document with `data`, `model`, `schedule`
//! and `fusion` sections plus the seed and precision.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{AugmentConfig, SyntheticSpec, FLOW_CHANNELS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::spatial::{PartFusion, Partitions};
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory holding `manifest.jsonl` and the clip files.
    pub root: PathBuf,
    /// Frames sampled per clip.
    pub frames: usize,
    pub augment: AugmentConfig,
    /// Generator settings used by `gen-data`.
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_eps() -> f64 {
    1e-8
}

impl ScheduleConfig {
    /// 100 epochs, batch 8, five warmup epochs, 1e-4 decaying to 1e-5.
    pub fn full_scale() -> Self {
        ScheduleConfig {
            epochs: 100,
            batch_size: 8,
            warmup_epochs: 5,
            lr_peak: 1e-4,
            lr_floor: 1e-5,
            weight_decay: 0.1,
            betas: default_betas(),
            eps: default_eps(),
        }
    }

    pub fn desk() -> Self {
        ScheduleConfig {
            epochs: 30,
            batch_size: 8,
            warmup_epochs: 2,
            lr_peak: 3e-3,
            lr_floor: 1e-5,
            weight_decay: 0.1,
            betas: default_betas(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.warmup_epochs <= self.epochs
            && self.lr_peak > 0.0
            && (0.0..=self.lr_peak).contains(&self.lr_floor)
            && self.weight_decay >= 0.0
            && self.betas.iter().all(|b| (0.0..1.0).contains(b))
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("schedule settings out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Weight of the flow logits in `q_rgb + α·q_flow`.
    pub alpha: f64,
    pub grid: Vec<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: 0.4,
            grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "fusion grid must be nonempty and strictly increasing".into(),
            ));
        }
        if self
            .grid
            .iter()
            .chain([&self.alpha])
            .any(|a| !(a.is_finite() && *a >= 0.0))
        {
            return Err(Error::Config("fusion weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
}

/// Named model variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Backbone and the global classifier only.
    GlobalOnly,
    SpatialOnly,
    TemporalOnly,
    LeftRightOnly,
    TopBottomOnly,
    /// Parts merged by concatenation instead of gated attention.
    ConcatFusion,
    /// Segments read the pooled features without recurrent encoding.
    NoGru,
    /// Alternate segment plan.
    Segments {
        count: usize,
        len: usize,
    },
}

impl Ablation {
    pub fn apply(self, model: &mut ModelConfig) {
        let c = model.backbone.out_channels();
        let mut spatial = crate::spatial::SpatialConfig::for_channels(c);
        let mut temporal = crate::temporal::TemporalConfig::for_channels(c);
        if let Some(s) = &model.spatial {
            spatial = s.clone();
        }
        if let Some(t) = &model.temporal {
            temporal = t.clone();
        }
        let (mut s, mut t) = (Some(spatial), Some(temporal));
        match self {
            Ablation::Full => {}
            Ablation::GlobalOnly => (s, t) = (None, None),
            Ablation::SpatialOnly => t = None,
            Ablation::TemporalOnly => s = None,
            Ablation::LeftRightOnly => {
                s.as_mut().unwrap().partitions = Partitions {
                    left_right: true,
                    top_bottom: false,
                };
                t = None;
            }
            Ablation::TopBottomOnly => {
                s.as_mut().unwrap().partitions = Partitions {
                    left_right: false,
                    top_bottom: true,
                };
                t = None;
            }
            Ablation::ConcatFusion => s.as_mut().unwrap().fusion = PartFusion::Concat,
            Ablation::NoGru => t.as_mut().unwrap().use_grus = false,
            Ablation::Segments { count, len } => {
                let t = t.as_mut().unwrap();
                t.segments = count;
                t.segment_len = len;
            }
        }
        model.spatial = s;
        model.temporal = t;
    }
}

impl ExperimentConfig {
    /// Small RGB run on the synthetic set.
    pub fn desk() -> Self {
        let spec = SyntheticSpec::default();
        ExperimentConfig {
            seed: 0,
            precision: Precision::Single,
            data: DataConfig {
                root: PathBuf::from("data/synthetic"),
                frames: 16,
                augment: AugmentConfig::desk(),
                synthetic: spec.clone(),
            },
            model: ModelConfig::desk(3, spec.num_classes),
            schedule: ScheduleConfig::desk(),
            fusion: FusionConfig::default(),
        }
    }

    /// Full-size recipe: 2048-channel backbone on 256×256 crops, 2000 classes.
    pub fn full_scale() -> Self {
        ExperimentConfig {
            seed: 0,
            precision: Precision::Single,
            data: DataConfig {
                root: PathBuf::from("data/wlasl2000"),
                frames: 16,
                augment: AugmentConfig::full_scale(),
                synthetic: SyntheticSpec::default(),
            },
            model: ModelConfig::full_scale(3, 2000),
            schedule: ScheduleConfig::full_scale(),
            fusion: FusionConfig::default(),
        }
    }

    /// Same run on the 10-channel flow stack, with independent weights.
    pub fn flow_stream(&self, root: PathBuf) -> Self {
        let mut cfg = self.clone();
        cfg.data.root = root;
        cfg.model.backbone = BackboneConfig {
            in_channels: FLOW_CHANNELS,
            ..cfg.model.backbone.clone()
        };
        cfg
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        ablation.apply(&mut self.model);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.fusion.validate()?;
        self.data.augment.validate()?;
        if self.data.frames == 0 {
            return Err(Error::Config("data.frames must be positive".into()));
        }
        let [h, w] = self
            .model
            .backbone
            .input_size(self.data.augment.crop / self.model.backbone.output_size[0].max(1));
        if (h, w) != (self.data.augment.crop, self.data.augment.crop) {
            return Err(Error::Config(format!(
                "backbone consumes {h}x{w} frames but crops are {0}x{0}",
                self.data.augment.crop
            )));
        }
        if let Some(t) = &self.model.temporal {
            crate::temporal::plan_segments(self.data.frames, t.segments, t.segment_len)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
