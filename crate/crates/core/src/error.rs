use std::time::Duration;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Clone, Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected} bits, got {actual} bits")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("authentication failure: ciphertext rejected")]
    AuthFailure,

    #[error("OKVS encoding failed after {attempts} attempts")]
    EncodeFailure { attempts: u32 },

    #[error("insufficient shares: need {needed}, got {got}")]
    InsufficientShares { needed: usize, got: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("connection error: {0}")]
    Connection(String),

    #[error("session timed out after {0:?}")]
    SessionTimeout(Duration),

    #[error("session aborted by party {from}: {reason}")]
    Aborted { from: u16, reason: String },

    #[error("entropy source unavailable: {0}")]
    Entropy(String),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Usage and input errors come from the caller; everything else is a
    /// failure of the session itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Usage(_) | Error::Input(_) | Error::LengthMismatch { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Connection(err.to_string())
    }
}
