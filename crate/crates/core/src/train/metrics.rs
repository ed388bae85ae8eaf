use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{argmax, top_k};

/// Accuracies in percent: top-1/top-5, per instance and per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1_pi: f64,
    pub top5_pi: f64,
    pub top1_pc: f64,
    pub top5_pc: f64,
}

/// Scores `(label, logits)` pairs. Classes absent from the list do not
/// enter the per-class mean.
pub fn score<'a>(items: impl IntoIterator<Item = (usize, &'a [f64])>) -> Result<Metrics> {
    // label -> (count, top-1 hits, top-5 hits)
    let mut per_class: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let (mut n, mut hit1, mut hit5) = (0usize, 0usize, 0usize);
    for (label, logits) in items {
        if label >= logits.len() {
            return Err(Error::invalid(
                "evaluate",
                format!("label {label} outside {} classes", logits.len()),
            ));
        }
        let h1 = argmax(logits) == label;
        let h5 = top_k(logits, 5).contains(&label);
        let e = per_class.entry(label).or_default();
        e.0 += 1;
        e.1 += h1 as usize;
        e.2 += h5 as usize;
        n += 1;
        hit1 += h1 as usize;
        hit5 += h5 as usize;
    }
    if n == 0 {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let classes = per_class.len() as f64;
    let pc = |f: fn(&(usize, usize, usize)) -> usize| {
        100.0 * per_class.values().map(|c| f(c) as f64 / c.0 as f64).sum::<f64>() / classes
    };
    Ok(Metrics {
        top1_pi: 100.0 * hit1 as f64 / n as f64,
        top5_pi: 100.0 * hit5 as f64 / n as f64,
        top1_pc: pc(|c| c.1),
        top5_pc: pc(|c| c.2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(c: usize, k: usize) -> Vec<f64> {
        (0..c).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn perfect_predictions_score_100() {
        let items: Vec<(usize, Vec<f64>)> = (0..6).map(|i| (i % 3, onehot(3, i % 3))).collect();
        let m = score(items.iter().map(|(l, q)| (*l, q.as_slice()))).unwrap();
        assert_eq!(
            (m.top1_pi, m.top5_pi, m.top1_pc, m.top5_pc),
            (100.0, 100.0, 100.0, 100.0)
        );
    }

    #[test]
    fn per_instance_and_per_class_differ() {
        let c = 8;
        let items = [
            (0, onehot(c, 0)),
            (0, onehot(c, 0)),
            (0, onehot(c, 0)),
            (1, onehot(c, 0)),
        ];
        let m = score(items.iter().map(|(l, q)| (*l, q.as_slice()))).unwrap();
        assert_eq!(m.top1_pi, 75.0);
        assert_eq!(m.top1_pc, 50.0);
        // Ties rank by index, so class 1 is second among the zeros.
        assert_eq!(m.top5_pi, 100.0);
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(score(std::iter::empty()).is_err());
    }
}
