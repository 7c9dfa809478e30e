//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, training, and persistence.
#[derive(Error, Debug)]
pub enum AgraError {
    /// Invalid configuration (bad key, missing key, out-of-range value).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation (bad label, empty input, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Array shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Non-finite values or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called before required state existed.
    #[error("state error: {0}")]
    State(String),

    /// A data file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Schema or checkpoint version does not match this build.
    #[error("version error: {0}")]
    Version(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AgraError>;

impl AgraError {
    /// Process exit code for the CLI contract: 1 validation, 2 runtime/numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            AgraError::Config(_)
            | AgraError::Argument(_)
            | AgraError::Dimension(_)
            | AgraError::State(_)
            | AgraError::Parse { .. }
            | AgraError::Version(_) => 1,
            AgraError::Numeric(_) => 2,
            AgraError::Io(_) => 3,
        }
    }
}
