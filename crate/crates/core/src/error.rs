use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpgError>;

#[derive(Debug, Error)]
pub enum SpgError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing guidance branch: {0}")]
    MissingBranch(&'static str),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("style feature cache miss at step {step}, layer {layer}")]
    CacheMiss { step: usize, layer: u32 },

    #[error("attention hooks already active on backbone `{0}`")]
    HookConflict(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("unsupported case: {0}")]
    Unsupported(String),

    #[error("numeric divergence at step {step} (timestep {timestep}): {what} is not finite")]
    Divergence {
        step: usize,
        timestep: usize,
        what: &'static str,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl SpgError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SpgError::InvalidInput(msg.into())
    }
}

impl From<safetensors::SafeTensorError> for SpgError {
    fn from(e: safetensors::SafeTensorError) -> Self {
        SpgError::Format(e.to_string())
    }
}
