use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::sampling::Mode;

/// Resize to `width × height`, crop a `crop × crop` window, maybe flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub width: usize,
    pub height: usize,
    pub crop: usize,
    pub hflip_prob: f64,
}

impl AugmentConfig {
    /// 320×256 frames, 256 crops, flip with p = 0.5.
    pub fn full_scale() -> Self {
        AugmentConfig {
            width: 320,
            height: 256,
            crop: 256,
            hflip_prob: 0.5,
        }
    }

    /// 36×32 frames, 32 crops. Flipping is off because the synthetic labels
    /// depend on which side each motion pattern appears.
    pub fn desk() -> Self {
        AugmentConfig {
            width: 36,
            height: 32,
            crop: 32,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.width.min(self.height) {
            return Err(Error::Config(format!(
                "crop {} does not fit a {}x{} frame",
                self.crop, self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Crop {
    /// Uniform window in training, centered at test time.
    pub fn draw(cfg: &AugmentConfig, mode: Mode, rng: &mut impl Rng) -> Self {
        let (dy, dx) = (cfg.height - cfg.crop, cfg.width - cfg.crop);
        let (top, left) = match mode {
            Mode::Train => (rng.random_range(0..=dy), rng.random_range(0..=dx)),
            Mode::Test => (dy / 2, dx / 2),
        };
        Crop {
            top,
            left,
            size: cfg.crop,
        }
    }
}

/// Source coordinate and weights for half-pixel-centered bilinear sampling.
fn taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every `H×W` plane of an `N×C×H×W` clip, corners not
/// aligned.
pub fn resize_bilinear(clip: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(Error::invalid("resize", format!("clip must be 4-D, got {s:?}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize", "target size must be positive"));
    }
    let (h, w) = (s[2], s[3]);
    if (h, w) == (height, width) {
        return Ok(clip.clone());
    }
    let (ty, tx) = (taps(height, h), taps(width, w));
    let mut out = Vec::with_capacity(s[0] * s[1] * height * width);
    for plane in clip.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let at = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(vec![s[0], s[1], height, width], out)
}

fn crop(clip: &Tensor<f32>, c: Crop) -> Result<Tensor<f32>> {
    let s = clip.shape();
    let (h, w) = (s[2], s[3]);
    if c.top + c.size > h || c.left + c.size > w {
        return Err(Error::invalid(
            "crop",
            format!(
                "{0}x{0} window at ({1}, {2}) exceeds {h}x{w} frame",
                c.size, c.top, c.left
            ),
        ));
    }
    let mut out = Vec::with_capacity(s[0] * s[1] * c.size * c.size);
    for plane in clip.data().chunks_exact(h * w) {
        for y in c.top..c.top + c.size {
            out.extend_from_slice(&plane[y * w + c.left..y * w + c.left + c.size]);
        }
    }
    Tensor::new(vec![s[0], s[1], c.size, c.size], out)
}

/// Mirrors every frame left to right. For flow stacks the horizontal
/// components (even channels) change sign as well.
pub fn flip_horizontal(clip: &Tensor<f32>, negate_even_channels: bool) -> Tensor<f32> {
    let s = clip.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = clip.clone();
    for (p, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let sign = if negate_even_channels && (p % c) % 2 == 0 {
            -1.0
        } else {
            1.0
        };
        for row in plane.chunks_exact_mut(w) {
            row.reverse();
            if sign < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    out
}

/// Resize, crop (one window for the whole clip) and, in training, flip.
pub fn augment(
    clip: &Tensor<f32>,
    mode: Mode,
    cfg: &AugmentConfig,
    flow: bool,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let resized = resize_bilinear(clip, cfg.height, cfg.width)?;
    let window = Crop::draw(cfg, mode, rng);
    let cropped = crop(&resized, window)?;
    let flip = mode == Mode::Train && cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob);
    Ok(if flip { flip_horizontal(&cropped, flow) } else { cropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn golden_downsample_averages_blocks() {
        let out = resize_bilinear(&ramp(&[1, 1, 4, 4]), 2, 2).unwrap();
        // Each output pixel sits at the center of a 2×2 block.
        assert_eq!(out.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn upsample_clamps_at_borders() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.0f32, 1.0]).unwrap();
        let out = resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn flip_is_an_involution() {
        let x = ramp(&[2, 10, 3, 5]);
        for flow in [false, true] {
            let back = flip_horizontal(&flip_horizontal(&x, flow), flow);
            assert_eq!(back.data(), x.data());
        }
        let f = flip_horizontal(&x, true);
        assert_eq!(f.data()[0], -4.0);
        assert_eq!(f.data()[15], 19.0);
    }

    #[test]
    fn test_mode_is_deterministic_center_crop() {
        let cfg = AugmentConfig {
            width: 6,
            height: 4,
            crop: 2,
            hflip_prob: 0.5,
        };
        let x = ramp(&[1, 1, 4, 6]);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = augment(&x, Mode::Test, &cfg, false, &mut r1).unwrap();
        let b = augment(&x, Mode::Test, &cfg, false, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), &[8.0, 9.0, 14.0, 15.0]);
    }

    #[test]
    fn train_crops_stay_in_range() {
        let cfg = AugmentConfig {
            width: 80,
            height: 64,
            crop: 64,
            hflip_prob: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = [false; 17];
        for _ in 0..1000 {
            let c = Crop::draw(&cfg, Mode::Train, &mut rng);
            assert_eq!(c.top, 0);
            assert!(c.left <= 16);
            seen[c.left] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let cfg = AugmentConfig {
            width: 4,
            height: 4,
            crop: 5,
            hflip_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(&ramp(&[1, 1, 4, 4]), Mode::Test, &cfg, false, &mut rng).is_err());
    }
}
