//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated (bad shape, bad range).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data is malformed (non-finite values, non-positive depth).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An evaluation had nothing to average over (empty mask, empty set).
    #[error("empty evaluation: {0}")]
    EmptyEvaluation(String),

    /// Two structures that must agree do not (e.g. a selected pixel with no
    /// refined row).
    #[error("inconsistency: {0}")]
    Inconsistency(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    /// Malformed tensor file or weight manifest.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
