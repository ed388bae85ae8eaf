use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::augment::{augment, AugmentConfig};
use super::clip::read_clip;
use super::derive_rng;
use super::flow::FLOW_CHANNELS;
use super::manifest::{Manifest, ManifestRecord, Split};
use super::sampling::{sample_frames, Mode};

/// A manifest plus the sampling and augmentation settings applied on load.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    frames: usize,
    augment: AugmentConfig,
}

impl Dataset {
    /// Opens `root/manifest.jsonl`.
    pub fn open(root: &Path, frames: usize, augment: AugmentConfig) -> Result<Self> {
        let manifest = Manifest::load(&root.join("manifest.jsonl"))?;
        Dataset::new(root, manifest, frames, augment)
    }

    pub fn new(root: &Path, manifest: Manifest, frames: usize, augment: AugmentConfig) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Config("frames per clip must be positive".into()));
        }
        augment.validate()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            frames,
            augment,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn records(&self, split: Split) -> Vec<&ManifestRecord> {
        self.manifest.split(split).collect()
    }

    /// Sampled, augmented `T×C×S×S` clip. Randomness depends only on
    /// `(seed, clip path, epoch)`.
    pub fn load(&self, record: &ManifestRecord, mode: Mode, seed: u64, epoch: u64) -> Result<Tensor<f32>> {
        let raw = read_clip(&Manifest::resolve(&self.root, record))?;
        let s = raw.shape().to_vec();
        let mut rng = derive_rng(&record.path, &[seed, epoch]);
        let idx = sample_frames(s[0], mode, self.frames, &mut rng);
        let frame = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(self.frames * frame);
        for i in idx {
            data.extend_from_slice(&raw.data()[i * frame..(i + 1) * frame]);
        }
        let sampled = Tensor::new(vec![self.frames, s[1], s[2], s[3]], data)?;
        augment(&sampled, mode, &self.augment, s[1] == FLOW_CHANNELS, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, write_dataset, SyntheticSpec};

    #[test]
    fn test_loads_are_pure_and_train_loads_vary_by_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            clips_per_class: 2,
            signers: 2,
            test_signers: 1,
            ..SyntheticSpec::default()
        };
        let (clips, m) = generate_synthetic(&spec).unwrap();
        write_dataset(dir.path(), &clips, &m).unwrap();
        let ds = Dataset::open(dir.path(), 16, AugmentConfig::desk()).unwrap();
        let rec = ds.records(Split::Test)[0].clone();
        let a = ds.load(&rec, Mode::Test, 1, 0).unwrap();
        let b = ds.load(&rec, Mode::Test, 2, 5).unwrap();
        assert_eq!(a.shape(), &[16, 3, 32, 32]);
        assert_eq!(a.data(), b.data());
        let t0 = ds.load(&rec, Mode::Train, 1, 0).unwrap();
        let t0b = ds.load(&rec, Mode::Train, 1, 0).unwrap();
        let t1 = ds.load(&rec, Mode::Train, 1, 1).unwrap();
        assert_eq!(t0.data(), t0b.data());
        assert_ne!(t0.data(), t1.data());
    }
}
