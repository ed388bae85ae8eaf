//! Clip storage, manifests, frame sampling, augmentation, the synthetic
//! factorial dataset and the pseudo-flow transform.

mod augment;
mod clip;
mod dataset;
mod flow;
mod manifest;
mod sampling;
mod synthetic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use augment::{augment, flip_horizontal, resize_bilinear, AugmentConfig, Crop};
pub use clip::{decode_clip, encode_clip, read_clip, write_clip, CLIP_MAGIC};
pub use dataset::Dataset;
pub use flow::{pseudo_flow, FLOW_CHANNELS, FLOW_DIFFERENCES};
pub use manifest::{Manifest, ManifestRecord, Split};
pub use sampling::{sample_frames, split_bounds, Mode};
pub use synthetic::{generate_synthetic, write_dataset, ClassFactors, ClipSet, SyntheticSpec};

/// Generator keyed by an ordered list of integers and an optional tag.
///
/// Used for every per-clip stream so results never depend on visiting order.
pub fn derive_rng(tag: &str, keys: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for k in keys {
        h.update(k.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
