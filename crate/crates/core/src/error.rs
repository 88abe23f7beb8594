use thiserror::Error;
use vortexlab_tensor::TensorError;

#[derive(Debug, Error)]
pub enum VortexError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("malformed data: {0}")]
    Data(String),
    #[error("checkpoint header is corrupt: {0}")]
    CorruptHeader(String),
    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, VortexError>;
