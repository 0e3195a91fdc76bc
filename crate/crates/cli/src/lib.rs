//! File formats, dataset generation and the command implementations behind
//! the `riskbound` binary.

pub mod artifact;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod dataset;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error(transparent)]
    Core(#[from] riskbound::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// A run finished but one of its checked invariants does not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    /// 1 usage, 2 runtime failure, 3 invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Invariant(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
