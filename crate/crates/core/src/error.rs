use nncore::{CheckpointError, NnError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScdpError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("scene sampling failed: {0}")]
    Sampling(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("{path}: line {line}: {message}")]
    DatasetLine { path: String, line: usize, message: String },

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ScdpError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScdpError::Argument(_) => 2,
            ScdpError::Data(_)
            | ScdpError::Sampling(_)
            | ScdpError::DegenerateScene(_)
            | ScdpError::DatasetLine { .. }
            | ScdpError::Checkpoint(_)
            | ScdpError::Io(_)
            | ScdpError::Json(_) => 3,
            ScdpError::Training(_) => 4,
            ScdpError::Nn(NnError::Dimension { .. }) => 3,
            ScdpError::Nn(NnError::Checkpoint(_)) => 3,
            ScdpError::Nn(_) => 4,
            ScdpError::Integrity(_) => 5,
        }
    }
}

pub type Result<T, E = ScdpError> = std::result::Result<T, E>;
