use thiserror::Error;

#[derive(Debug, Error)]
pub enum AfdpError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("budget ledger already holds an entry for iteration {0}")]
    DuplicateIteration(u64),

    #[error("delay trace exhausted at update {0}")]
    TraceExhausted(u64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("malformed frame: {0}")]
    Protocol(String),

    #[error("run aborted: non-finite gradient payload at iteration {0}")]
    NonFinitePayload(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(String),
}

impl From<csv::Error> for AfdpError {
    fn from(e: csv::Error) -> Self {
        AfdpError::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AfdpError>;
