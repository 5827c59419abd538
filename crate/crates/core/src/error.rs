use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate candidate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("text has {words} word(s); at least 2 are required to split into prefix and suffix")]
    TooFewWords { words: usize },

    #[error("token granularity mismatch: {0:?} vs {1:?}")]
    GranularityMismatch(crate::textops::Granularity, crate::textops::Granularity),

    #[error("template error: {0}")]
    Template(String),

    #[error("backend {model} lacks the {capability:?} capability")]
    Capability {
        model: String,
        capability: crate::backends::Capability,
    },

    #[error("authentication failed (HTTP {status}): {body}")]
    Auth { status: u16, body: String },

    #[error("prompt too long for model: {0}")]
    PromptTooLong(String),

    #[error("retries exhausted after {attempts} attempt(s); last status {last_status:?}: {message}")]
    RetriesExhausted {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("candidate mismatch: {0}")]
    CandidateMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that come from talking to a model rather than from
    /// bad input data or configuration.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Capability { .. }
                | Error::Auth { .. }
                | Error::PromptTooLong(_)
                | Error::RetriesExhausted { .. }
                | Error::Backend(_)
        )
    }
}
