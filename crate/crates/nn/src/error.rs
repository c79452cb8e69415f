use thiserror::Error;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer `{layer}`: shape mismatch, expected {expected}, got {got:?}")]
    Shape {
        layer: String,
        expected: String,
        got: Vec<usize>,
    },

    #[error("invalid layer spec `{layer}`: {reason}")]
    InvalidSpec { layer: String, reason: String },

    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,

    #[error("seed gradient has {got} values, output has {expected}")]
    SeedMismatch { expected: usize, got: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("optimizer state does not match parameter store: {0}")]
    StateMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn shape(layer: &str, expected: impl Into<String>, got: &[usize]) -> Self {
        NnError::Shape {
            layer: layer.to_string(),
            expected: expected.into(),
            got: got.to_vec(),
        }
    }
}
