//! Training, evaluation, checkpoint I/O and the gradient-check suite.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};
pub use config::{Seeds, TrainConfig};
pub use gradcheck::{gradcheck_suite, CheckLine};
pub use trainer::{
    evaluate, evaluate_part, prepare_data, train, train_on, Control, EpochMetrics, Evaluation,
    PreparedData, TrainOutcome,
};
