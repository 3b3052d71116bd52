//! Experiment driver behind the `swimlane` binary: live training runs,
//! discrete-event simulation, sync/async comparison, plots and the pool
//! churn benchmark. Metrics are JSON lines, sweep curves CSV, figures SVG.

use std::path::{Path, PathBuf};

pub mod commands;
pub mod plot;
pub mod records;
pub mod summary;

pub use records::{Body, Record, RunSummary};
pub use summary::{success_rate_curve, summarize, ThroughputSummary};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// The run started and was stopped by the watchdog or a failed update.
    #[error("{message}\ndiagnostics written to {}", diagnostics.display())]
    Aborted {
        message: String,
        diagnostics: PathBuf,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for invalid input, 2 for an aborted run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) | Self::Io { .. } => 1,
            Self::Aborted { .. } => 2,
        }
    }
}
