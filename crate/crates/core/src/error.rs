//! Error type shared across the crate.

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A mathematical precondition was violated (bad length, non-positive
    /// temperature, out-of-range token, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed user input: corpus text, token sequences, batches.
    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("training error in stage {stage}: {message}")]
    Training { stage: String, message: String },

    #[error("non-tunable variant {0}: the trainable student sits inside the shift term (pass allow_nontunable to run it anyway)")]
    NonTunable(String),

    #[error("protocol error: {0}")]
    Protocol(#[from] crate::wire::frame::ProtocolError),

    /// Network failure that the caller may retry.
    #[error("transport error: {0}")]
    Transport(String),

    /// No answer within the client's deadline. Retryable.
    #[error("transport error: {0}")]
    Timeout(String),

    /// Error frame returned by a logit server.
    #[error("remote error for request {request_id}: {message}")]
    Remote { request_id: u64, message: String },

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// An I/O failure annotated with what was being done.
    pub(crate) fn io(context: impl std::fmt::Display, e: io::Error) -> Self {
        Error::Io(format!("{context}: {e}"))
    }

    /// Short machine-parsable class name, used as the CLI error prefix.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::NonTunable(_) => "non-tunable",
            Error::Protocol(_) => "protocol",
            Error::Transport(_) | Error::Timeout(_) => "transport",
            Error::Remote { .. } => "remote",
            Error::Snapshot(_) => "snapshot",
            Error::Io(_) => "io",
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Timeout(_))
    }
}
