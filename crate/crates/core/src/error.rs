use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: degenerate input: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: no operations have been recorded")]
    EmptyGraph,

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGrad(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss function is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
