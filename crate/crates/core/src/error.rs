//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error class used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid configuration or incompatible settings (exit code 2).
    Config,
    /// Bad or inconsistent input data (exit code 3).
    Data,
    /// Broken internal invariant (exit code 4).
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("size limit exceeded: {0}")]
    Size(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value during evaluation: {0}")]
    Evaluation(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Class used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Version(_) => ErrorClass::Config,
            Error::Dimension { .. }
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Size(_)
            | Error::Corruption(_)
            | Error::Io(_) => ErrorClass::Data,
            Error::Contract(_) | Error::Evaluation(_) => ErrorClass::Internal,
        }
    }
}
