use thiserror::Error;

/// Errors shared by every module of the simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error(
        "numeric failure: {message} (shape {rows}x{cols}, frobenius norm {frobenius:e}, max |entry| {max_abs:e})"
    )]
    NumericFailure {
        message: String,
        rows: usize,
        cols: usize,
        frobenius: f64,
        max_abs: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
