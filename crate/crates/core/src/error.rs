use thiserror::Error;

pub type Result<T> = std::result::Result<T, AecError>;

#[derive(Error, Debug)]
pub enum AecError {
    #[error("input too short: need at least {needed} samples, got {got}")]
    EmptyInput { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("processing error: {0}")]
    Processing(String),
    #[error("model load error: {0}")]
    Load(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),
    #[error("format error: {0}")]
    Format(String),
}

impl AecError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AecError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AecError::Config(msg.into())
    }
}
