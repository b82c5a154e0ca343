use std::path::PathBuf;

use mmvt_tensor::TensorError;

use crate::model_spec::ParseError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("audio: {0}")]
    Audio(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error("missing {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Invalid(msg.into())
}
