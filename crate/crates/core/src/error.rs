//! Error types shared across the estimation pipeline.

use thiserror::Error;

/// Errors produced by dataset construction, model fitting, and reporting.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: bad CSV cells, inconsistent dimensions, invalid specs.
    #[error("validation error: {0}")]
    Validation(String),

    /// The data cannot identify a required parameter (empty non-compliance
    /// cell, no informative discordant subjects, ...).
    #[error("identification error: {0}")]
    Identification(String),

    /// The Newton maximizer failed to reach the gradient tolerance.
    #[error("convergence error: {0}")]
    Convergence(String),

    /// A linear system was singular to working precision.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// Filesystem / serialization failures.
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 identification,
    /// 4 convergence (and singular systems), 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Identification(_) => 3,
            Error::Convergence(_) | Error::Singular(_) => 4,
            Error::Io(_) => 5,
        }
    }
}
