use thiserror::Error;

#[derive(Error, Debug)]
pub enum AldmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("evaluator gate failed: {0}")]
    GateFailed(String),
    #[error("dataset hash mismatch: {0}")]
    HashMismatch(String),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, AldmError>;

impl AldmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        AldmError::InvalidArgument(msg.into())
    }
}
