use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph: node {id} does not belong to this graph (len {len})")]
    UnknownNode { id: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter `{0}` not found")]
    MissingParameter(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("training diverged at step {step}: loss {loss} (parts: {parts})")]
    Diverged { step: usize, loss: f64, parts: String },

    #[error("I/O failure on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
