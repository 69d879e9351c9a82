//! Objective, optimizer and the training loop.

pub mod loss;
pub mod optim;

pub use loss::{smoothed_targets, target_matrix, total_loss, weighted_loss, LossConfig, LossTerms};
pub use optim::{lr_at, sgd_step, OptimConfig};
pub mod trainer;

pub use trainer::{batches, log_to_csv, train, EpochLog, TrainConfig, TrainOutcome, LOG_HEADER};
