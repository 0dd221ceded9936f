use std::path::Path;

use thiserror::Error;
use vagam::GamError;

/// Failures grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Input files or argument values were rejected.
    #[error("{0}")]
    Data(String),
    /// The fit stopped at the iteration limit; outputs were still written.
    #[error("{0}")]
    NotConverged(String),
    /// I/O or numerical failure.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Data(_) => 3,
            CliError::NotConverged(_) => 4,
        }
    }

    pub fn data(e: GamError) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Failure(format!("{}: {e}", path.display()))
    }
}

impl From<GamError> for CliError {
    fn from(e: GamError) -> Self {
        CliError::Failure(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
