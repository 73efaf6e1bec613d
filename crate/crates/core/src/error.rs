use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown primitive kind `{0}`")]
    UnknownPrimitive(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every tensor that requires grad")]
    DetachedLoss,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("tile rejected: {0}")]
    TileRejected(String),

    #[error("zero variance in metadata component `{0}` on the training split")]
    ZeroVariance(&'static str),

    #[error("empty tile bag; relax tile filtering (tissue fraction floor) for this slide")]
    EmptyBag,

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("classes missing from labels: {0:?}")]
    MissingClass(Vec<usize>),

    #[error("missing prerequisite: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
