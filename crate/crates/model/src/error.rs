use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] signmotion_core::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("training became unstable at step {step}: non-finite loss or prediction")]
    TrainingInstability { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
