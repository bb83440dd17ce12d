use thiserror::Error;

/// Errors raised across the framework.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in `{tensor}`: expected {expected}, got {got}")]
    Shape {
        tensor: String,
        expected: String,
        got: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// The replay buffer does not hold enough transitions yet. Callers may retry
    /// after collecting more experience.
    #[error("insufficient data: need {needed} transitions, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("verification failed for trial seeds {seeds:?}: {detail}")]
    Verification { seeds: Vec<u64>, detail: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(tensor: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            tensor: tensor.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Whether the failed operation can succeed later without changing inputs.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::InsufficientData { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
