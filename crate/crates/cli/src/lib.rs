//! Experiment runner: corpus generation, the strategy grid, the conflict
//! sweep and report rendering, all driven by one TOML config.

pub mod commands;
pub mod config;
pub mod manifest;
mod plot;
mod pool;

use thiserror::Error;
use update_core::dataset::DatasetError;
use update_core::eval::EvalError;
use update_core::strategies::StrategyError;

pub use commands::{cmd_curve, cmd_generate, cmd_report, cmd_run, CurveOutcome, RunOptions, RunOutcome};
pub use config::{Config, Overrides, Scale};
pub use manifest::{CellEntry, RunManifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("no reports found under {0}")]
    NoReports(String),
    #[error("{path} was produced by a different configuration (hash {found}, expected {expected}); use a fresh output directory")]
    ConfigMismatch { path: String, found: String, expected: String },
    #[error("stopped after {completed} work units; rerun to resume")]
    Interrupted { completed: usize },
    #[error("{} cell(s) failed, {} missing:\n{}", failures.len(), missing.len(), failures.join("\n"))]
    Incomplete { failures: Vec<String>, missing: Vec<String> },
    #[error("plot: {0}")]
    Plot(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}
