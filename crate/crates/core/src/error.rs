use std::io;

use thiserror::Error;

/// Failures reported by a completion, topic or embedding backend.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    /// Transient failure; the caller may retry.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    /// The backend refused the request; retrying will not help.
    #[error("backend rejected request: {0}")]
    Rejected(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("unknown turn index {0}")]
    UnknownTurn(usize),

    #[error("order is not a permutation of the historical turns: {0}")]
    NotAPermutation(String),

    #[error("dependency graph for {graph} does not match conversation {conversation}")]
    GraphMismatch { graph: String, conversation: String },

    #[error("no dependency-preserving swap exists")]
    NoValidSwap,

    #[error("unsupported prompt strategy {0}")]
    UnsupportedStrategy(String),

    #[error("failed to parse model output: {0}")]
    ParseFailure(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("conversation has no turn with a response to score")]
    NoScorableTurn,

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("need at least 2 positives, found {0}")]
    InsufficientPositives(usize),

    #[error("need {required} negatives, found {available}")]
    InsufficientNegatives { required: usize, available: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("incomplete selection: {0}")]
    IncompleteSelection(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("stage `{0}` has not been run")]
    MissingPrerequisiteStage(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
