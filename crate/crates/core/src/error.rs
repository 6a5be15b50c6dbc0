use std::io;

use thiserror::Error;

/// Errors raised anywhere in the ripple library.
#[derive(Debug, Error)]
pub enum RippleError {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A serialized tensor could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A computation produced a value that cannot be represented (for example a
    /// zero attention denominator with no stabilizer).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = RippleError> = std::result::Result<T, E>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(RippleError::Argument(msg.into()))
}
