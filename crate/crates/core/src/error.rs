use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),

    #[error("backend {backend:?} does not support {capability}")]
    Capability { backend: String, capability: String },

    /// Transport failure after exhausting retries.
    #[error("transport error from {backend:?} after {attempts} attempt(s): {message}")]
    Transport {
        backend: String,
        attempts: u32,
        retryable: bool,
        message: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::Transport {
                retryable: true,
                ..
            }
        )
    }
}
