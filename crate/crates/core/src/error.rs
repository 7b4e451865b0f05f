use std::path::PathBuf;

use dae_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DaeError>;

#[derive(Debug, Error)]
pub enum DaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: format error at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DaeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DaeError::Io {
            path: path.into(),
            source,
        }
    }
}
