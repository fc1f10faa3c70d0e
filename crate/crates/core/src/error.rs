use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph node {node} references a later node {input}; the graph is not acyclic")]
    Cycle { node: usize, input: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("more objects than queries: {objects} ground-truth instances for {queries} predictions")]
    TooManyObjects { objects: usize, queries: usize },

    #[error("malformed run-length string: {0}")]
    MalformedRle(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("image id mismatch: {0}")]
    ImageIdMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
