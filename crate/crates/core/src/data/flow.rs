//! Frame-difference surrogate for a stacked optical-flow input.
//!
//! Each output frame holds five `(u, v)` pairs. Pair `k` is the normal-flow
//! estimate `-Dₖ·∇G / (|∇G|² + ε)` for the grayscale difference `Dₖ` between
//! source frames `i+k+1` and `i+k` (indices clamped to the clip), clipped to
//! `[-1, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLOW_DIFFERENCES: usize = 5;
pub const FLOW_CHANNELS: usize = 2 * FLOW_DIFFERENCES;
const EPS: f64 = 1e-2;

fn grayscale(clip: &Tensor<f32>) -> Vec<Vec<f64>> {
    let s = clip.shape();
    let hw = s[2] * s[3];
    clip.data()
        .chunks_exact(3 * hw)
        .map(|f| {
            (0..hw)
                .map(|p| 0.299 * f[p] as f64 + 0.587 * f[hw + p] as f64 + 0.114 * f[2 * hw + p] as f64)
                .collect()
        })
        .collect()
}

/// Central differences with replicated borders.
fn gradient(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let at = |yy: usize, xx: usize| img[yy * w + xx];
            gx[y * w + x] = 0.5 * (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1)));
            gy[y * w + x] = 0.5 * (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x));
        }
    }
    (gx, gy)
}

/// `T×3×H×W` RGB clip to a `T×10×H×W` flow stack.
pub fn pseudo_flow(clip: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = clip.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::invalid("pseudo_flow", format!("expected T×3×H×W, got {s:?}")));
    }
    let (t, h, w) = (s[0], s[2], s[3]);
    let gray = grayscale(clip);
    let mut out = Vec::with_capacity(t * FLOW_CHANNELS * h * w);
    for i in 0..t {
        for k in 0..FLOW_DIFFERENCES {
            let a = &gray[(i + k).min(t - 1)];
            let b = &gray[(i + k + 1).min(t - 1)];
            let mid: Vec<f64> = a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect();
            let (gx, gy) = gradient(&mid, h, w);
            let mut u = Vec::with_capacity(h * w);
            let mut v = Vec::with_capacity(h * w);
            for p in 0..h * w {
                let d = b[p] - a[p];
                let norm = gx[p] * gx[p] + gy[p] * gy[p] + EPS;
                u.push((-d * gx[p] / norm).clamp(-1.0, 1.0) as f32);
                v.push((-d * gy[p] / norm).clamp(-1.0, 1.0) as f32);
            }
            out.extend(u);
            out.extend(v);
        }
    }
    Tensor::new(vec![t, FLOW_CHANNELS, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_from(t: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor<f32> {
        let mut data = Vec::new();
        for i in 0..t {
            for _ in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(i, y, x));
                    }
                }
            }
        }
        Tensor::new(vec![t, 3, h, w], data).unwrap()
    }

    #[test]
    fn static_clip_has_no_flow() {
        let c = clip_from(4, 5, 6, |_, y, x| ((y * 7 + x * 3) % 5) as f32 / 5.0);
        let f = pseudo_flow(&c).unwrap();
        assert_eq!(f.shape(), &[4, 10, 5, 6]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_count_is_fixed() {
        for t in [1, 2, 7] {
            let c = clip_from(t, 3, 3, |i, _, _| i as f32 * 0.1);
            assert_eq!(pseudo_flow(&c).unwrap().shape()[1], 10);
        }
    }

    #[test]
    fn horizontal_translation_moves_only_u() {
        // A ramp patch spanning every row, moving right one pixel per frame.
        let patch = |i: usize, x: usize| {
            let rel = x as f32 - i as f32 - 4.0;
            if (0.0..8.0).contains(&rel) {
                0.1 * rel
            } else {
                0.0
            }
        };
        let c = clip_from(8, 6, 24, |i, _, x| patch(i, x));
        let f = pseudo_flow(&c).unwrap();
        let plane = 6 * 24;
        let (mut u_sum, mut v_max) = (0.0f64, 0.0f32);
        for (ch, chunk) in f.data().chunks_exact(plane).enumerate() {
            if ch % 10 % 2 == 0 {
                u_sum += chunk.iter().map(|&v| v as f64).sum::<f64>();
            } else {
                v_max = chunk.iter().fold(v_max, |m, v| m.max(v.abs()));
            }
        }
        assert!(u_sum > 1.0, "rightward motion gives positive u, got {u_sum}");
        assert_eq!(v_max, 0.0);
    }
}
