use thiserror::Error;

#[derive(Debug, Error)]
pub enum LairError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Schema or syntax violation in a dataset/trace/config file.
    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LairError>;

pub(crate) fn invalid(msg: impl Into<String>) -> LairError {
    LairError::InvalidArgument(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> LairError {
    LairError::Shape(msg.into())
}
