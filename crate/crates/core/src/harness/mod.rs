//! Training, evaluation and diagnostic entry points shared by the CLI,
//! benches and integration tests.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod train;

pub use config::RunConfig;
pub use eval::{evaluate, Evaluation, PredictionRecord};
pub use train::{train, EpochLog, PreparedSample, TrainLog, TrainOutcome};
