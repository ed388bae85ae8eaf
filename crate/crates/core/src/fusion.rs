//! Two-stream late fusion over exported logits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::metrics::{score, Metrics};

/// Final-head logits of one clip from one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub clip_id: String,
    pub label: usize,
    pub logits: Vec<f64>,
}

/// Per-clip logits of one stream; ids unique, logit length constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitExport {
    records: Vec<ExportRecord>,
}

impl LogitExport {
    pub fn new(records: Vec<ExportRecord>) -> Result<Self> {
        let Some(c) = records.first().map(|r| r.logits.len()) else {
            return Err(Error::invalid("logit_export", "no records"));
        };
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.clip_id.as_str()) {
                return Err(Error::invalid(
                    "logit_export",
                    format!("duplicate clip_id {}", r.clip_id),
                ));
            }
            if r.logits.len() != c || r.label >= c {
                return Err(Error::invalid(
                    "logit_export",
                    format!(
                        "clip {} has {} logits and label {}; expected {c} logits",
                        r.clip_id,
                        r.logits.len(),
                        r.label
                    ),
                ));
            }
        }
        Ok(LogitExport { records })
    }

    pub fn records(&self) -> &[ExportRecord] {
        &self.records
    }

    pub fn metrics(&self) -> Result<Metrics> {
        score(self.records.iter().map(|r| (r.label, r.logits.as_slice())))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        LogitExport::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LogitExport::parse(&text)
    }
}

/// `q_rgb + alpha·q_opt`.
pub fn late_fuse(q_rgb: &[f64], q_opt: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if q_rgb.len() != q_opt.len() {
        return Err(Error::shape("late_fuse", &[q_rgb.len()], &[q_opt.len()]));
    }
    Ok(q_rgb.iter().zip(q_opt).map(|(a, b)| a + alpha * b).collect())
}

/// Pairs each RGB record with the flow record of the same clip.
fn align<'a>(rgb: &'a LogitExport, opt: &'a LogitExport) -> Result<Vec<(&'a ExportRecord, &'a ExportRecord)>> {
    let by_id: BTreeMap<&str, &ExportRecord> = opt.records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    let rgb_ids: BTreeSet<&str> = rgb.records.iter().map(|r| r.clip_id.as_str()).collect();
    let opt_ids: BTreeSet<&str> = by_id.keys().copied().collect();
    if rgb_ids != opt_ids {
        let diff: Vec<&str> = rgb_ids.symmetric_difference(&opt_ids).copied().collect();
        return Err(Error::invalid(
            "alpha_sweep",
            format!(
                "exports cover different clips; symmetric difference: {}",
                diff.join(", ")
            ),
        ));
    }
    rgb.records
        .iter()
        .map(|r| {
            let o = by_id[r.clip_id.as_str()];
            if o.label != r.label {
                return Err(Error::invalid(
                    "alpha_sweep",
                    format!("clip {} labelled {} and {}", r.clip_id, r.label, o.label),
                ));
            }
            Ok((r, o))
        })
        .collect()
}

/// Metrics of the fused logits at one weight.
pub fn fuse_at(rgb: &LogitExport, opt: &LogitExport, alpha: f64) -> Result<Metrics> {
    let pairs = align(rgb, opt)?;
    let fused = pairs
        .iter()
        .map(|(r, o)| Ok((r.label, late_fuse(&r.logits, &o.logits, alpha)?)))
        .collect::<Result<Vec<_>>>()?;
    score(fused.iter().map(|(l, q)| (*l, q.as_slice())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub rows: Vec<SweepRow>,
    /// Highest per-instance top-1; the smallest weight wins ties.
    pub best_alpha: f64,
    pub inputs: Vec<String>,
    pub config_hash: Option<String>,
}

impl FusionReport {
    pub fn best(&self) -> &SweepRow {
        self.rows
            .iter()
            .find(|r| r.alpha == self.best_alpha)
            .expect("best alpha is one of the rows")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("alpha  top1_pi  top5_pi  top1_pc  top5_pc\n");
        for r in &self.rows {
            let m = &r.metrics;
            let mark = if r.alpha == self.best_alpha { "  *" } else { "" };
            let _ = writeln!(
                out,
                "{:5.2}  {:7.2}  {:7.2}  {:7.2}  {:7.2}{mark}",
                r.alpha, m.top1_pi, m.top5_pi, m.top1_pc, m.top5_pc
            );
        }
        let _ = writeln!(out, "best alpha: {}", self.best_alpha);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fused metrics for every weight in `grid` (strictly increasing).
pub fn alpha_sweep(rgb: &LogitExport, opt: &LogitExport, grid: &[f64]) -> Result<FusionReport> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "alpha_sweep",
            "grid must be nonempty and strictly increasing",
        ));
    }
    let rows = grid
        .iter()
        .map(|&alpha| {
            Ok(SweepRow {
                alpha,
                metrics: fuse_at(rgb, opt, alpha)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = &rows[0];
    for r in &rows[1..] {
        if r.metrics.top1_pi > best.metrics.top1_pi {
            best = r;
        }
    }
    Ok(FusionReport {
        best_alpha: best.alpha,
        rows,
        inputs: Vec::new(),
        config_hash: None,
    })
}
