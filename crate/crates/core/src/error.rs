use thiserror::Error;

#[derive(Debug, Error)]
pub enum GevstError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("vocabulary error: token id {id} out of range for vocabulary of {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error at line {line}: missing or invalid field `{field}`")]
    Schema { line: usize, field: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GevstError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(GevstError::Dimension(msg.into()))
}
