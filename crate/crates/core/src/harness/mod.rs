//! Training protocol, evaluation, comparison studies and diagnostics.

pub mod config;
pub mod export;
pub mod gradcheck;
pub mod report;
pub mod study;
pub mod train;

pub use config::TrainConfig;
pub use report::RunReport;
pub use train::{evaluate, train, Metrics, TrainOutcome};
