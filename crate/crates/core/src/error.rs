use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid position id {0}: must be finite and non-negative")]
    InvalidPosition(f64),

    #[error("relative distance {distance} exceeds the model's position budget of {max}")]
    PositionOverflow { distance: f64, max: usize },

    #[error("token id {id} is outside the vocabulary (size {vocab})")]
    OutOfVocab { id: u32, vocab: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
