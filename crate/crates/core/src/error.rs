use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("loss diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        trace: Vec<crate::optim::LossRecord>,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
