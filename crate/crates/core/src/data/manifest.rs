use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One clip: `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
    pub split: Split,
    pub signer_id: u64,
}

/// Validated clip list. Labels are dense and no signer spans both splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
    num_classes: usize,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Manifest("no records".into()));
        }
        let mut ids = BTreeSet::new();
        if let Some(r) = records.iter().find(|r| !ids.insert(r.path.as_str())) {
            return Err(Error::Manifest(format!("duplicate clip {}", r.path)));
        }
        let labels: BTreeSet<usize> = records.iter().map(|r| r.label).collect();
        let num_classes = labels.len();
        if labels.iter().copied().ne(0..num_classes) {
            return Err(Error::Manifest(format!(
                "labels must be dense in [0, {num_classes}), found {labels:?}"
            )));
        }
        let mut splits: BTreeMap<u64, Split> = BTreeMap::new();
        for r in &records {
            match splits.insert(r.signer_id, r.split) {
                Some(prev) if prev != r.split => {
                    return Err(Error::Manifest(format!(
                        "signer {} appears in both train and test",
                        r.signer_id
                    )))
                }
                _ => {}
            }
        }
        Ok(Manifest { records, num_classes })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        Manifest::new(records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Absolute location of a record's clip file.
    pub fn resolve(root: &Path, record: &ManifestRecord) -> PathBuf {
        root.join(&record.path)
    }
}
