//! File formats, experiment configuration and command workflows on top of `pvlu-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod plot;
pub mod pool;

pub use config::ExperimentConfig;
pub use error::{exit, LabError, LabResult};
