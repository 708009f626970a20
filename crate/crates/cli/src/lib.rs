//! Config-driven experiment runner: dataset generation, GMM fitting,
//! library training, zero-shot evaluation, sweeps and the variance
//! identity check, all with on-disk artifacts and CSV reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::CliError;
