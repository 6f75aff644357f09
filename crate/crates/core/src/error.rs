use std::path::PathBuf;

use vdpm_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("alignment degenerate: {0}")]
    AlignmentDegenerate(String),
    #[error("representation mismatch: {0}")]
    RepresentationMismatch(String),
    #[error("empty set: {0}")]
    EmptySet(String),
    #[error("degenerate scale: {0}")]
    DegenerateScale(String),
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no overlap: {0}")]
    NoOverlap(String),
    #[error("decoder cache miss: {0}")]
    CacheMiss(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
