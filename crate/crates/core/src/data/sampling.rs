use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

/// Half-open frame range of split `i` when `len` frames are cut into `t`.
pub fn split_bounds(len: usize, t: usize, i: usize) -> (usize, usize) {
    (i * len / t, (i + 1) * len / t)
}

/// One frame index per split: uniform in training, the split center at test
/// time. Clips shorter than `t` repeat frames via `⌊i·len/t⌋`.
pub fn sample_frames(len: usize, mode: Mode, t: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(len >= 1, "clip must hold at least one frame");
    if len < t {
        return (0..t).map(|i| i * len / t).collect();
    }
    (0..t)
        .map(|i| {
            let (lo, hi) = split_bounds(len, t, i);
            match mode {
                Mode::Train => rng.random_range(lo..hi),
                Mode::Test => (lo + hi - 1) / 2,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_frame_per_split_when_lengths_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ident: Vec<usize> = (0..16).collect();
        assert_eq!(sample_frames(16, Mode::Train, 16, &mut rng), ident);
        assert_eq!(sample_frames(16, Mode::Test, 16, &mut rng), ident);
    }

    #[test]
    fn test_mode_takes_split_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let want: Vec<usize> = (0..16).map(|i| 2 * i).collect();
        assert_eq!(sample_frames(32, Mode::Test, 16, &mut rng), want);
        assert_eq!(sample_frames(3, Mode::Test, 6, &mut rng), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn train_draws_stay_inside_their_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let len = rng.random_range(16..90);
            let idx = sample_frames(len, Mode::Train, 16, &mut rng);
            for (i, &f) in idx.iter().enumerate() {
                let (lo, hi) = split_bounds(len, 16, i);
                assert!(lo <= f && f < hi, "len {len} split {i} got {f}");
            }
        }
    }
}
