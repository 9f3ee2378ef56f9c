use std::path::PathBuf;

use thiserror::Error;

use crate::autonn::archive::ArchiveError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {site}: {detail}")]
    NonFinite { site: String, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("rank {achieved} is below the required {required}")]
    Rank { achieved: usize, required: usize },

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("weight archive {path} is required for pretrained initialization but was not found")]
    MissingWeights { path: PathBuf },

    #[error("archive is missing required tensor `{0}`")]
    MissingTensor(String),

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
