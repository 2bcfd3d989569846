//! Desk-scale training and evaluation.

pub mod eval;
pub mod schedule;
pub mod sgd;
pub mod trainer;

pub use eval::{evaluate, metrics_from_logits, predict, EvalReport};
pub use schedule::LrSchedule;
pub use sgd::{sgd_momentum_step, Sgd};
pub use trainer::{batch_gradients, parallel_gradients, train, BatchGradients, StepRecord, TrainConfig, TrainOutcome};
