//! Optimization: AdamW, the warmup/cosine schedule, metrics, checkpoints and
//! the epoch loop.

pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, EpochLog, CHECKPOINT_VERSION};
pub use metrics::{score, Metrics};
pub use optim::AdamW;
pub use schedule::{lr_at, Schedule};
pub use trainer::{evaluate, evaluate_checkpoint, mean_loss, train, TrainOptions, TrainOutcome};
