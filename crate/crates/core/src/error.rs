use std::path::PathBuf;

use thiserror::Error;

use crate::image::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a decodable PNG: {detail}")]
    Decode { path: PathBuf, detail: String },

    #[error("{path}: unsupported image format: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced {0}")]
    NonFinite(String),

    #[error("guidance diverged at inner iteration {iteration}{}", timestep.map(|t| format!(" (timestep {t})")).unwrap_or_default())]
    Divergence {
        iteration: usize,
        timestep: Option<usize>,
    },

    #[error("every restoration failed in sweep cell {0}")]
    CellFailed(String),

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
