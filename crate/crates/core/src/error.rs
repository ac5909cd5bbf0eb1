//! Error classes shared by every runtime call.

use thiserror::Error;

/// Errors returned by runtime operations.
///
/// Variants map one-to-one onto the runtime's error classes; the payload is a
/// human-readable diagnostic.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Arg(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("operation pending: {0}")]
    Pending(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("spawn failure: {0}")]
    Spawn(String),
    #[error("resource exhausted: {0}")]
    Exhausted(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("message truncated: {incoming} bytes incoming, {capacity} bytes available")]
    Truncate { incoming: usize, capacity: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Arg(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn pending(msg: impl Into<String>) -> Self {
        Error::Pending(msg.into())
    }

    pub(crate) fn transport(msg: impl Into<String>) -> Self {
        Error::Transport(msg.into())
    }

    /// Short class name, stable across releases (`ERR_ARG`, `ERR_STATE`, ...).
    pub fn class(&self) -> &'static str {
        match self {
            Error::Arg(_) => "ERR_ARG",
            Error::State(_) => "ERR_STATE",
            Error::Pending(_) => "ERR_PENDING",
            Error::Transport(_) => "ERR_TRANSPORT",
            Error::Spawn(_) => "ERR_SPAWN",
            Error::Exhausted(_) => "ERR_EXHAUSTED",
            Error::Unsupported(_) => "ERR_UNSUPPORTED",
            Error::Truncate { .. } => "ERR_TRUNCATE",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Transport(e.to_string())
    }
}
