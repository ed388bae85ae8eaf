//! Coarse spatiotemporal feature extractor producing the map `M` (T×C×H'×W').
//!
//! Two miniature variants stand in for a pretrained video backbone:
//! `pooling_only` averages each frame down to the output grid and broadcasts
//! channels through a fixed 1×1 map (exactly flip-equivariant, no trainable
//! weights); `shift_cnn` stacks per-frame conv blocks with a temporal channel
//! shift in front of each block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Padding;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    PoolingOnly,
    ShiftCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// 3 for RGB, 10 for stacked pseudo-flow.
    pub in_channels: usize,
    /// Output width of each conv block; `pooling_only` uses a single entry.
    pub widths: Vec<usize>,
    /// Fraction of channels shifted in each temporal direction.
    pub shift_fraction: f64,
    /// Spatial size `(H', W')` of the emitted map.
    pub output_size: [usize; 2],
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub padding: Padding,
}

fn default_kernel() -> usize {
    3
}

impl BackboneConfig {
    /// 3-block shift CNN emitting `32 × 4 × 4` from 32×32 frames. Circular
    /// padding keeps the map translation-equivariant, so pooled features
    /// carry no absolute position.
    pub fn desk(in_channels: usize) -> Self {
        BackboneConfig {
            variant: BackboneVariant::ShiftCnn,
            in_channels,
            widths: vec![8, 16, 32],
            shift_fraction: 0.125,
            output_size: [4, 4],
            kernel: 3,
            padding: Padding::Circular,
        }
    }

    /// Four blocks ending at 2048 channels on a 16×16 grid from 256×256 crops.
    pub fn full_scale(in_channels: usize) -> Self {
        BackboneConfig {
            variant: BackboneVariant::ShiftCnn,
            in_channels,
            widths: vec![256, 512, 1024, 2048],
            shift_fraction: 0.125,
            output_size: [16, 16],
            kernel: 3,
            padding: Padding::Zero,
        }
    }

    pub fn pooling_only(in_channels: usize, channels: usize, output_size: [usize; 2]) -> Self {
        BackboneConfig {
            variant: BackboneVariant::PoolingOnly,
            in_channels,
            widths: vec![channels],
            shift_fraction: 0.0,
            output_size,
            kernel: 1,
            padding: Padding::Zero,
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.in_channels == 0 {
            return err("in_channels must be positive".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return err(format!("channel widths {:?} must be positive", self.widths));
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return err(format!("channel widths {:?} must be nondecreasing", self.widths));
        }
        if !(0.0..=0.5).contains(&self.shift_fraction) {
            return err(format!("shift_fraction {} outside [0, 0.5]", self.shift_fraction));
        }
        if self.output_size.contains(&0) {
            return err("output size must be positive".into());
        }
        match self.variant {
            BackboneVariant::PoolingOnly => {
                if self.widths.len() != 1 {
                    return err("pooling_only takes exactly one channel width".into());
                }
            }
            BackboneVariant::ShiftCnn => {
                if self.kernel.is_multiple_of(2) {
                    return err(format!("kernel {} must be odd", self.kernel));
                }
                if self.shift_fraction > 0.0 {
                    if let Some(w) = self.widths.iter().find(|&&w| (w as f64 * self.shift_fraction) < 1.0) {
                        return err(format!(
                            "shift_fraction {} moves no channels of a {w}-wide stage",
                            self.shift_fraction
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Input frame size this configuration consumes.
    pub fn input_size(&self, pool: usize) -> [usize; 2] {
        let f = match self.variant {
            BackboneVariant::PoolingOnly => pool,
            BackboneVariant::ShiftCnn => 1 << self.widths.len(),
        };
        [self.output_size[0] * f, self.output_size[1] * f]
    }
}

/// Number of channels moved in each direction for a `channels`-wide tensor.
pub fn shift_fold(channels: usize, fraction: f64) -> usize {
    (channels as f64 * fraction).floor() as usize
}

/// Temporal shift of `x: T×C×H×W` by `⌊C·fraction⌋` channels each way.
pub fn temporal_shift<F: Real>(tape: &mut Tape<F>, x: Var, fraction: f64) -> Result<Var> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::invalid(
            "temporal_shift",
            format!("fraction {fraction} outside [0, 0.5]"),
        ));
    }
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    tape.temporal_shift(x, shift_fold(c, fraction))
}

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<ConvBlock>,
    /// Fixed 1×1 channel map of the pooling variant.
    broadcast: Option<ParamId>,
}

impl Backbone {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut broadcast = None;
        match cfg.variant {
            BackboneVariant::PoolingOnly => {
                let (cin, cout) = (cfg.in_channels, cfg.out_channels());
                let mut w = Tensor::zeros(&[cout, cin, 1, 1]);
                for co in 0..cout {
                    w.data_mut()[co * cin + co % cin] = F::one();
                }
                broadcast = Some(store.fixed("backbone.broadcast", w));
            }
            BackboneVariant::ShiftCnn => {
                let mut cin = cfg.in_channels;
                let k = cfg.kernel;
                for (i, &cout) in cfg.widths.iter().enumerate() {
                    // He-uniform keeps ReLU activations at unit scale without normalization.
                    let bound = (6.0 / (cin * k * k) as f64).sqrt();
                    blocks.push(ConvBlock {
                        weight: store.uniform(format!("backbone.block{i}.weight"), &[cout, cin, k, k], bound),
                        bias: store.zeroed(format!("backbone.block{i}.bias"), &[cout]),
                    });
                    cin = cout;
                }
            }
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            blocks,
            broadcast,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Maps `clip: T×C_in×H×W` to the feature map `M: T×C×H'×W'`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, clip: Var) -> Result<Var> {
        let shape = tape.shape(clip).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::invalid(
                "backbone_forward",
                format!("clip shape {shape:?} does not carry {} channels", self.cfg.in_channels),
            ));
        }
        let [oh, ow] = self.cfg.output_size;
        let (h, w) = (shape[2], shape[3]);
        match self.cfg.variant {
            BackboneVariant::PoolingOnly => {
                let k = h / oh;
                if h % oh != 0 || w % ow != 0 || w / ow != k {
                    return Err(Error::invalid(
                        "backbone_forward",
                        format!("{h}x{w} frames do not pool evenly to {oh}x{ow}"),
                    ));
                }
                let pooled = if k > 1 { tape.avg_pool(clip, k)? } else { clip };
                let bias = tape.constant(&Tensor::zeros(&[self.cfg.out_channels()]));
                let map = self.broadcast.expect("pooling variant has a broadcast map");
                tape.conv2d(pooled, p[map], bias, Padding::Zero)
            }
            BackboneVariant::ShiftCnn => {
                let [ih, iw] = self.cfg.input_size(1);
                if h != ih || w != iw {
                    return Err(Error::invalid(
                        "backbone_forward",
                        format!(
                            "{h}x{w} frames are not reduced to {oh}x{ow} by {} stride-2 blocks",
                            self.blocks.len()
                        ),
                    ));
                }
                let mut x = clip;
                for b in &self.blocks {
                    x = temporal_shift(tape, x, self.cfg.shift_fraction)?;
                    x = tape.conv2d(x, p[b.weight], p[b.bias], self.cfg.padding)?;
                    x = tape.relu(x)?;
                    x = tape.avg_pool(x, 2)?;
                }
                Ok(x)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        let mut c = BackboneConfig::desk(3);
        c.widths = vec![16, 8];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk(3);
        c.shift_fraction = 0.6;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk(3);
        c.widths = vec![4, 16, 32];
        assert!(c.validate().is_err(), "0.125 of 4 channels shifts nothing");
        assert!(BackboneConfig::desk(3).validate().is_ok());
        assert!(BackboneConfig::full_scale(3).validate().is_ok());
    }

    #[test]
    fn shift_fraction_zero_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 4 * 2 * 2).map(|v| v as f64).collect();
        let x = tape.constant(&Tensor::from_f64(&[2, 4, 2, 2], &data).unwrap());
        let y = temporal_shift(&mut tape, x, 0.0).unwrap();
        assert_eq!(tape.data(y), data.as_slice());
    }

    #[test]
    fn single_frame_shift_zero_fills() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::<f64>::full(&[1, 4, 1, 1], 3.0));
        let y = temporal_shift(&mut tape, x, 0.25).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn full_scale_map_shape() {
        let mut store = ParamStore::<f32>::symbolic();
        let bb = Backbone::new(&mut store, &BackboneConfig::full_scale(3)).unwrap();
        let mut tape = Tape::shape_only();
        let p = store.bind(&mut tape).unwrap();
        let clip = tape.symbolic_leaf(&[16, 3, 256, 256], false).unwrap();
        let m = bb.forward(&mut tape, &p, clip).unwrap();
        assert_eq!(tape.shape(m), &[16, 2048, 16, 16]);
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let mut store = ParamStore::<f32>::symbolic();
        let bb = Backbone::new(&mut store, &BackboneConfig::desk(3)).unwrap();
        let mut tape = Tape::shape_only();
        let p = store.bind(&mut tape).unwrap();
        let clip = tape.symbolic_leaf(&[16, 3, 30, 32], false).unwrap();
        assert!(bb.forward(&mut tape, &p, clip).is_err());
        let clip = tape.symbolic_leaf(&[16, 10, 32, 32], false).unwrap();
        assert!(bb.forward(&mut tape, &p, clip).is_err());
    }

    #[test]
    fn pooling_only_identity_map_keeps_constant() {
        let mut store = ParamStore::<f64>::zeros();
        let bb = Backbone::new(&mut store, &BackboneConfig::pooling_only(3, 3, [2, 2])).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let clip = tape.constant(&Tensor::full(&[2, 3, 4, 4], 0.7));
        let m = bb.forward(&mut tape, &p, clip).unwrap();
        assert_eq!(tape.shape(m), &[2, 3, 2, 2]);
        assert!(tape.data(m).iter().all(|&v| v == 0.7));
    }
}
