use std::path::PathBuf;

use iml_numerics::NumericsError;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("generation error: {0}")]
    Generation(String),
    #[error("invalid variant: {0}")]
    InvalidVariant(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}:{line}: {message}")]
    ParseAt { path: String, line: usize, message: String },
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("model: {0}")]
    Model(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("training: {0}")]
    Training(String),
    #[error("analysis: {0}")]
    Analysis(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}
