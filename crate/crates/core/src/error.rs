use std::io;

use thiserror::Error;

pub type Result<T, E = SctError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SctError {
    /// An argument violates the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data or configuration failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A Gram matrix could not be factorized even after the full jitter ladder.
    #[error("conditioning error: Cholesky failed at jitter {jitter:e} ({context})")]
    Conditioning { jitter: f64, context: String },

    /// Iterative numerics failed (non-convergence, NaN gradients, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// A binary file is malformed; `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
}

impl SctError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        SctError::Domain(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        SctError::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        SctError::Numerical(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SctError::Domain(_) | SctError::Validation(_) => 2,
            SctError::Conditioning { .. } | SctError::Numerical(_) => 3,
            SctError::Io(_) | SctError::Format { .. } => 4,
        }
    }
}
