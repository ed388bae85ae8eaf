use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::config::ScheduleConfig;

/// Per-iteration learning rate: linear warmup from zero, then cosine decay
/// to the floor, reached exactly on the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_peak: f64,
    pub lr_floor: f64,
}

impl Schedule {
    pub fn new(cfg: &ScheduleConfig, steps_per_epoch: u64) -> Self {
        Schedule {
            warmup_steps: cfg.warmup_epochs as u64 * steps_per_epoch,
            total_steps: cfg.epochs as u64 * steps_per_epoch,
            lr_peak: cfg.lr_peak,
            lr_floor: cfg.lr_floor,
        }
    }
}

pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.lr_peak * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(1).saturating_sub(s.warmup_steps);
    let progress = if span == 0 {
        0.0
    } else {
        ((step - s.warmup_steps) as f64 / span as f64).min(1.0)
    };
    s.lr_floor + 0.5 * (s.lr_peak - s.lr_floor) * (1.0 + (PI * progress).cos())
}
