use spg_core::SpgError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Core(#[from] SpgError),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{failed} of {total} evaluation items failed")]
    PartialFailure { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl EvalError {
    pub fn usage(msg: impl Into<String>) -> Self {
        EvalError::Usage(msg.into())
    }

    /// 0 success, 2 usage, 3 missing capability, 4 partial eval failure,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvalError::Usage(_) | EvalError::Toml(_) => 2,
            EvalError::Core(SpgError::InvalidInput(_) | SpgError::Configuration(_)) => 2,
            EvalError::Core(SpgError::Capability(_)) => 3,
            EvalError::PartialFailure { .. } => 4,
            _ => 1,
        }
    }
}
