use thiserror::Error;

pub type Result<T> = std::result::Result<T, D2tError>;

#[derive(Debug, Error)]
pub enum D2tError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate channel: effective channel has zero norm")]
    DegenerateChannel,

    #[error("episode finished: slot {slot} >= horizon {horizon}")]
    EpisodeOver { slot: usize, horizon: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("diffusion step {k} out of range 0..{steps}")]
    StepOutOfRange { k: usize, steps: usize },

    #[error("sampler diverged at step {k}: {detail}")]
    SamplerDiverged { k: usize, detail: String },

    #[error("oracle search space {0} exceeds the 1e7 guard")]
    OracleTooLarge(f64),

    #[error("buffer: {0}")]
    Buffer(String),

    #[error("artifact: {0}")]
    Artifact(String),

    #[error(transparent)]
    Nn(#[from] d2t_nn::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
}
