//! Per-feature classifiers, the accumulated cross-entropy objective, and the
//! final prediction rule.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Binding, ParamStore};
use crate::tensor::{cross_entropy, Real, Tape, Var};

/// The ten supervised outputs, in objective order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Left,
    Right,
    Top,
    Bottom,
    LeftRight,
    TopBottom,
    Global,
    Spatial,
    Temporal,
    Fused,
}

impl Head {
    pub const ALL: [Head; 10] = [
        Head::Left,
        Head::Right,
        Head::Top,
        Head::Bottom,
        Head::LeftRight,
        Head::TopBottom,
        Head::Global,
        Head::Spatial,
        Head::Temporal,
        Head::Fused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Head::Left => "q_left",
            Head::Right => "q_right",
            Head::Top => "q_top",
            Head::Bottom => "q_bottom",
            Head::LeftRight => "q_lr",
            Head::TopBottom => "q_tb",
            Head::Global => "q_sg",
            Head::Spatial => "q_s",
            Head::Temporal => "q_temp",
            Head::Fused => "q_st",
        }
    }

    /// Whether the term belongs to the spatial group of the objective.
    pub fn is_spatial(self) -> bool {
        !matches!(self, Head::Temporal | Head::Fused)
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Class logits from every head a model has, kept in [`Head::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    entries: Vec<(Head, Vec<f64>)>,
}

impl LogitBundle {
    pub fn new(mut entries: Vec<(Head, Vec<f64>)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("logit_bundle", "duplicate head"));
        }
        let Some(c) = entries.first().map(|e| e.1.len()) else {
            return Err(Error::invalid("logit_bundle", "no heads"));
        };
        if c == 0 || entries.iter().any(|e| e.1.len() != c) {
            return Err(Error::invalid("logit_bundle", "heads disagree on class count"));
        }
        Ok(LogitBundle { entries })
    }

    pub fn num_classes(&self) -> usize {
        self.entries[0].1.len()
    }

    pub fn heads(&self) -> impl Iterator<Item = Head> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn entries(&self) -> &[(Head, Vec<f64>)] {
        &self.entries
    }

    pub fn get(&self, head: Head) -> Option<&[f64]> {
        self.entries.iter().find(|e| e.0 == head).map(|e| e.1.as_slice())
    }

    pub fn get_mut(&mut self, head: Head) -> Option<&mut Vec<f64>> {
        self.entries.iter_mut().find(|e| e.0 == head).map(|e| &mut e.1)
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == Head::ALL.len()
    }

    /// Head used for prediction: `q_st`, or `q_sg` for models without branches.
    pub fn final_head(&self) -> Head {
        if self.get(Head::Fused).is_some() {
            Head::Fused
        } else {
            Head::Global
        }
    }

    pub fn final_logits(&self) -> &[f64] {
        self.get(self.final_head()).expect("bundle always holds its final head")
    }
}

/// Sum of the cross-entropy of every head against `label`, unweighted.
pub fn total_loss(bundle: &LogitBundle, label: usize) -> Result<f64> {
    bundle
        .entries
        .iter()
        .try_fold(0.0, |acc, (_, q)| Ok(acc + cross_entropy(q, label)?))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, ordered by value then index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Predicted class from the final head only.
pub fn predict(bundle: &LogitBundle) -> usize {
    argmax(bundle.final_logits())
}

/// Affine classifier over the time-averaged feature.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new<F: Real>(store: &mut ParamStore<F>, head: Head, d_in: usize, classes: usize) -> Self {
        Classifier {
            linear: Linear::new(store, &format!("head.{}", head.name()), d_in, classes),
        }
    }

    /// `feature: T×d → logits: C`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, feature: Var) -> Result<Var> {
        let d = *tape.shape(feature).last().unwrap_or(&0);
        if tape.shape(feature).len() != 2 || d != self.linear.d_in {
            return Err(Error::invalid(
                "classify",
                format!(
                    "feature shape {:?} does not match head width {}",
                    tape.shape(feature),
                    self.linear.d_in
                ),
            ));
        }
        let pooled = tape.mean(feature, &[0])?;
        let row = tape.reshape(pooled, &[1, d])?;
        let logits = self.linear.forward(tape, p, row)?;
        tape.reshape(logits, &[self.linear.d_out])
    }
}

/// Tape version of [`total_loss`]; terms are added in the same order.
pub fn total_loss_on_tape<F: Real>(tape: &mut Tape<F>, logits: &[(Head, Var)], label: usize) -> Result<Var> {
    let mut sorted = logits.to_vec();
    sorted.sort_by_key(|e| e.0);
    let mut total: Option<Var> = None;
    for (_, q) in sorted {
        let ce = tape.cross_entropy(q, label)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    total.ok_or_else(|| Error::invalid("total_loss", "no heads"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(f: impl Fn(Head) -> Vec<f64>) -> LogitBundle {
        LogitBundle::new(Head::ALL.iter().map(|&h| (h, f(h))).collect()).unwrap()
    }

    #[test]
    fn uniform_bundle_loss() {
        let b = bundle(|_| vec![0.0; 4]);
        assert!((total_loss(&b, 2).unwrap() - 10.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_bundle_loss_vanishes() {
        let b = bundle(|_| vec![0.0, 0.0, 40.0]);
        assert!(total_loss(&b, 2).unwrap() <= 1e-9);
        assert!(total_loss(&b, 3).is_err());
    }

    #[test]
    fn predict_uses_fused_head_only() {
        let mut b = bundle(|h| {
            if h == Head::Fused {
                vec![0.0, 1.0, 0.0, 0.0]
            } else {
                vec![5.0, 0.0, 0.0, 0.0]
            }
        });
        assert_eq!(predict(&b), 1);
        b.get_mut(Head::Global).unwrap()[3] = 100.0;
        assert_eq!(predict(&b), 1);
    }

    #[test]
    fn ties_break_low() {
        assert_eq!(argmax(&[2.0, 1.0, 0.0, 2.0]), 0);
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
    }

    #[test]
    fn bundle_rejects_ragged_heads() {
        let r = LogitBundle::new(vec![(Head::Global, vec![0.0; 3]), (Head::Fused, vec![0.0; 4])]);
        assert!(r.is_err());
    }
}
