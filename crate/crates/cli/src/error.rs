use std::path::Path;

use prism_core::acquisition::AcquisitionError;
use prism_core::extraction::ExtractionError;
use prism_core::floquet::FloquetError;
use prism_core::metrics::MetricsError;
use prism_core::scenario::ScenarioError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Path(String),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Floquet(#[from] FloquetError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{0} sweep point(s) failed")]
    SweepFailures(usize),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        CliError::Csv {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for unreadable input, 3 for engine failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. }
            | CliError::Schema(_)
            | CliError::Path(_)
            | CliError::Input { .. } => 2,
            CliError::Io { .. } | CliError::Csv { .. } => 1,
            _ => 3,
        }
    }
}
