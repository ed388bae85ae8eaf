//! Factorial synthetic sign clips.
//!
//! A class is a tuple (left motion pattern, right motion pattern, top
//! texture, sub-action order). Two Gaussian blobs oscillate in the lower
//! left and lower right regions; a full-width striped band fills the upper
//! region.
//! A static anchor marks each hand's rest position. With two orders the
//! hands move one after the other instead of together, so order is only
//! visible through time.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::clip::write_clip;
use super::derive_rng;
use super::manifest::{Manifest, ManifestRecord, Split};

const BLOB_COLOR: [f32; 3] = [1.0, 0.8, 0.6];
/// Static mark at each hand's rest position; motion direction shows as the
/// orientation of the hand relative to it.
const ANCHOR_COLOR: [f32; 3] = [0.2, 0.4, 0.9];
const LEFT_CENTER: f64 = 0.28;
const RIGHT_CENTER: f64 = 0.72;
const HAND_ROW: f64 = 0.75;
/// Horizontal half-extent of each hand region, as a fraction of the width.
const REGION_HALF: f64 = 0.16;
const STRIPE_PERIOD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub left_patterns: usize,
    pub right_patterns: usize,
    pub textures: usize,
    /// 1: both hands move together; 2: one after the other, either order.
    pub orders: usize,
    pub clips_per_class: usize,
    pub raw_length: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub signers: u64,
    /// Signers `signers - test_signers ..` form the test split.
    pub test_signers: u64,
    pub blob_sigma: f64,
    /// Peak displacement of a hand in pixels.
    pub amplitude: f64,
    /// Largest per-signer offset of a hand's rest position in pixels.
    pub jitter: f64,
    /// Oscillation cycles per sub-action.
    pub cycles: f64,
}

impl Default for SyntheticSpec {
    /// 8 classes (2·2·2·1), 40 clips each, 32 frames of 32×36.
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            left_patterns: 2,
            right_patterns: 2,
            textures: 2,
            orders: 1,
            clips_per_class: 40,
            raw_length: 32,
            height: 32,
            width: 36,
            noise_std: 0.03,
            seed: 0,
            signers: 20,
            test_signers: 4,
            blob_sigma: 1.0,
            amplitude: 3.0,
            jitter: 0.5,
            cycles: 4.0,
        }
    }
}

/// Factor levels of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassFactors {
    pub left: usize,
    pub right: usize,
    pub texture: usize,
    pub order: usize,
}

impl SyntheticSpec {
    pub fn factor_product(&self) -> usize {
        self.left_patterns * self.right_patterns * self.textures * self.orders
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("synthetic: {m}")));
        if self.factor_product() == 0 || self.num_classes != self.factor_product() {
            return err(format!(
                "num_classes {} must equal {}·{}·{}·{}",
                self.num_classes, self.left_patterns, self.right_patterns, self.textures, self.orders
            ));
        }
        if self.orders > 2 {
            return err("at most two sub-action orders exist".into());
        }
        if self.clips_per_class == 0 || self.raw_length < 2 || self.height < 4 || self.width < 4 {
            return err("clip count, length and frame size are too small".into());
        }
        if self.signers < 2 || self.test_signers == 0 || self.test_signers >= self.signers {
            return err("need at least one train and one test signer".into());
        }
        if (self.clips_per_class as u64) < self.signers {
            return err(format!(
                "{} clips per class cannot cover {} signers",
                self.clips_per_class, self.signers
            ));
        }
        if self.noise_std.is_nan()
            || self.noise_std < 0.0
            || self.blob_sigma.is_nan()
            || self.blob_sigma <= 0.0
            || self.amplitude < 0.0
            || self.jitter < 0.0
            || self.cycles < 0.0
        {
            return err("noise, sigma, amplitude, jitter and cycles must be non-negative".into());
        }
        let reach = 2.0 * self.blob_sigma + self.amplitude + self.jitter;
        let horizontal = REGION_HALF * self.width as f64;
        let vertical = (1.0 - HAND_ROW) * self.height as f64;
        if reach > horizontal || reach > vertical {
            return err(format!(
                "blobs reach {reach:.2} px but hand regions allow {:.2} px",
                horizontal.min(vertical)
            ));
        }
        Ok(())
    }

    pub fn factors(&self, label: usize) -> ClassFactors {
        let order = label % self.orders;
        let rest = label / self.orders;
        let texture = rest % self.textures;
        let rest = rest / self.textures;
        ClassFactors {
            left: rest / self.right_patterns,
            right: rest % self.right_patterns,
            texture,
            order,
        }
    }

    pub fn label(&self, f: ClassFactors) -> usize {
        ((f.left * self.right_patterns + f.right) * self.textures + f.texture) * self.orders + f.order
    }

    fn split_of(&self, signer: u64) -> Split {
        if signer >= self.signers - self.test_signers {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// Appearance of one clip: signer traits plus per-clip variation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Style {
    offsets: [(f64, f64); 2],
    amp_scale: f64,
    phases: [f64; 2],
    brightness: f32,
    stripe_phase: f64,
}

impl Style {
    /// Signer traits; offsets use half of the jitter budget.
    fn signer(spec: &SyntheticSpec, rng: &mut impl Rng) -> Self {
        let j = 0.5 * spec.jitter;
        let mut off = || (rng.random_range(-j..=j), rng.random_range(-j..=j));
        let offsets = [off(), off()];
        Style {
            offsets,
            amp_scale: rng.random_range(0.85..=1.0),
            phases: [0.0; 2],
            brightness: rng.random_range(0.75..=1.0),
            stripe_phase: rng.random_range(0.0..STRIPE_PERIOD),
        }
    }

    /// Adds the other half of the offset budget, a fresh phase per hand and
    /// a small amplitude change.
    fn clip(&self, spec: &SyntheticSpec, rng: &mut impl Rng) -> Self {
        let j = 0.5 * spec.jitter;
        let mut s = *self;
        for o in &mut s.offsets {
            o.0 += rng.random_range(-j..=j);
            o.1 += rng.random_range(-j..=j);
        }
        s.phases = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        s.amp_scale *= rng.random_range(0.9..=1.0);
        s
    }
}

/// Displacement of `hand` following `pattern` at phase-local time `tau ∈ [0, 1)`.
/// The stroke runs between 0.2 and 1 times the amplitude, so it never returns
/// to the anchor and every frame shows its direction.
fn displacement(
    spec: &SyntheticSpec,
    style: &Style,
    hand: usize,
    pattern: usize,
    patterns: usize,
    tau: f64,
) -> (f64, f64) {
    let dir = pattern as f64 * PI / patterns as f64;
    let swing = (2.0 * PI * spec.cycles * tau + style.phases[hand]).sin();
    let a = spec.amplitude * style.amp_scale * (0.6 + 0.4 * swing);
    (a * dir.cos(), a * dir.sin())
}

/// Max-composites a Gaussian blob of peak `gain` into a `3×h×w` frame.
#[allow(clippy::too_many_arguments)]
fn splat(frame: &mut [f32], h: usize, w: usize, cx: f64, cy: f64, sigma: f64, gain: f32, color: [f32; 3]) {
    let reach = 3.0 * sigma;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil().max(0.0) as usize).min(h - 1);
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil().max(0.0) as usize).min(w - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let g = ((-d2 * inv).exp() as f32) * gain;
            for (c, k) in color.iter().enumerate() {
                let v = &mut frame[c * h * w + y * w + x];
                *v = v.max(g * k);
            }
        }
    }
}

/// Noise-free rendering; `noise` adds pixel noise and clips to `[0, 1]`.
pub(crate) fn render(
    spec: &SyntheticSpec,
    f: ClassFactors,
    style: &Style,
    noise: Option<&mut dyn rand::RngCore>,
) -> Tensor<f32> {
    let (t, h, w) = (spec.raw_length, spec.height, spec.width);
    let mut data = vec![0f32; t * 3 * h * w];

    let (tex_top, tex_bot) = ((0.1 * h as f64) as usize, (0.4 * h as f64) as usize);
    let angle = f.texture as f64 * PI / spec.textures as f64;
    let mut texture = vec![0f32; h * w];
    for y in tex_top..tex_bot {
        for x in 0..w {
            let s = x as f64 * angle.cos() + y as f64 * angle.sin() + style.stripe_phase;
            texture[y * w + x] = (0.3 + 0.3 * (2.0 * PI * s / STRIPE_PERIOD).sin()) as f32;
        }
    }

    let centers = [
        (LEFT_CENTER * w as f64, HAND_ROW * h as f64),
        (RIGHT_CENTER * w as f64, HAND_ROW * h as f64),
    ];
    let patterns = [(f.left, spec.left_patterns), (f.right, spec.right_patterns)];
    let half = t / 2;
    for i in 0..t {
        let frame = &mut data[i * 3 * h * w..(i + 1) * 3 * h * w];
        for plane in frame.chunks_exact_mut(h * w) {
            plane.copy_from_slice(&texture);
        }
        for hand in 0..2 {
            // Phase-local time, or `None` while the hand rests.
            let tau = if spec.orders == 1 {
                Some(i as f64 / t as f64)
            } else {
                let first = (hand == 0) == (f.order == 0);
                match (first, i < half) {
                    (true, true) => Some(i as f64 / half as f64),
                    (false, false) => Some((i - half) as f64 / (t - half) as f64),
                    _ => None,
                }
            };
            let (dx, dy) = tau.map_or((0.0, 0.0), |tau| {
                displacement(spec, style, hand, patterns[hand].0, patterns[hand].1, tau)
            });
            let rest_x = centers[hand].0 + style.offsets[hand].0;
            let rest_y = centers[hand].1 + style.offsets[hand].1;
            splat(
                frame,
                h,
                w,
                rest_x,
                rest_y,
                spec.blob_sigma,
                0.6 * style.brightness,
                ANCHOR_COLOR,
            );
            splat(
                frame,
                h,
                w,
                rest_x + dx,
                rest_y + dy,
                spec.blob_sigma,
                style.brightness,
                BLOB_COLOR,
            );
        }
    }
    if let Some(rng) = noise {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated noise level");
        for v in &mut data {
            *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![t, 3, h, w], data).expect("shape matches buffer")
}

/// `(relative path, clip)` pairs.
pub type ClipSet = Vec<(String, Tensor<f32>)>;

/// Deterministic dataset for `spec`: its clips and their manifest.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ClipSet, Manifest)> {
    spec.validate()?;
    let styles: Vec<Style> = (0..spec.signers)
        .map(|s| Style::signer(spec, &mut derive_rng("signer", &[spec.seed, s])))
        .collect();
    let mut clips = Vec::with_capacity(spec.num_classes * spec.clips_per_class);
    let mut records = Vec::with_capacity(clips.capacity());
    for label in 0..spec.num_classes {
        let factors = spec.factors(label);
        for j in 0..spec.clips_per_class {
            let signer = j as u64 % spec.signers;
            let mut rng = derive_rng("clip", &[spec.seed, label as u64, j as u64]);
            let style = styles[signer as usize].clip(spec, &mut rng);
            let clip = render(spec, factors, &style, Some(&mut rng));
            let path = format!("clips/c{label:03}_{j:04}.svt");
            records.push(ManifestRecord {
                path: path.clone(),
                label,
                split: spec.split_of(signer),
                signer_id: signer,
            });
            clips.push((path, clip));
        }
    }
    Ok((clips, Manifest::new(records)?))
}

/// Writes clips under `root` and the manifest to `root/manifest.jsonl`.
pub fn write_dataset(root: &Path, clips: &[(String, Tensor<f32>)], manifest: &Manifest) -> Result<()> {
    for (path, clip) in clips {
        let full = root.join(path);
        if let Some(dir) = full.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_clip(&full, clip)?;
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    manifest.save(&root.join("manifest.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            clips_per_class: 3,
            signers: 3,
            test_signers: 1,
            raw_length: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn factorial_class_count() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.factor_product(), 8);
        for label in 0..8 {
            assert_eq!(spec.label(spec.factors(label)), label);
        }
        let bad = SyntheticSpec { num_classes: 9, ..spec };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let (a, ma) = generate_synthetic(&small()).unwrap();
        let (b, mb) = generate_synthetic(&small()).unwrap();
        assert_eq!(ma, mb);
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.data() == y.1.data()));
        let (c, _) = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a[0].1.data(), c[0].1.data());
    }

    #[test]
    fn split_is_signer_disjoint_and_values_in_range() {
        let (clips, m) = generate_synthetic(&small()).unwrap();
        assert_eq!(m.split(Split::Test).count(), 8);
        assert!(m.split(Split::Test).all(|r| r.signer_id == 2));
        assert!(clips
            .iter()
            .all(|(_, c)| c.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn oversized_blobs_are_infeasible() {
        let spec = SyntheticSpec {
            blob_sigma: 4.0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(m)) if m.contains("reach")));
    }

    #[test]
    fn order_is_invisible_to_time_shuffled_statistics() {
        let spec = SyntheticSpec {
            orders: 2,
            num_classes: 16,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        let mut rng = derive_rng("signer", &[0, 0]);
        let style = Style::signer(&spec, &mut rng).clip(&spec, &mut rng);
        let f0 = ClassFactors {
            left: 0,
            right: 1,
            texture: 1,
            order: 0,
        };
        let f1 = ClassFactors { order: 1, ..f0 };
        let a = render(&spec, f0, &style, None);
        let b = render(&spec, f1, &style, None);
        assert_ne!(a.data(), b.data());
        let sorted = |t: &Tensor<f32>| {
            let mut v = t.data().to_vec();
            v.sort_by(f32::total_cmp);
            v
        };
        assert_eq!(sorted(&a), sorted(&b));
    }
}
