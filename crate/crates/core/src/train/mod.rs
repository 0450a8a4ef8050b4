//! Optimizers, learning-rate schedules and the training loop.

mod optim;
mod trainer;

pub use optim::{LrSchedule, Optimizer, OptimizerConfig};
pub use trainer::{finetune, train, EpochRecord, TrainConfig, TrainLog, TrainOutcome};
