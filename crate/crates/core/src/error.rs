use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("waveform too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown speaker id {0}")]
    UnknownSpeaker(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at step {step}: non-finite {component}")]
    Divergence { step: u64, component: String },

    #[error("model is untrained: {0}")]
    Untrained(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Validation errors map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::InvalidInput(_)
                | Self::Config(_)
                | Self::UnknownSpeaker(_)
                | Self::ShapeMismatch(_)
                | Self::NonFinite(_)
                | Self::TooShort { .. }
        )
    }
}
