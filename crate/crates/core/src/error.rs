use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was invoked in the wrong lifecycle state (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// A hyperparameter or configuration value is out of its domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("weight container: {0}")]
    Weights(String),

    #[error("non-finite loss at batch {batch} of epoch {epoch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("dataset: {0}")]
    Dataset(String),

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
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
