use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("point {index} lies behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(String),

    #[error("invalid vertex regressor: {0}")]
    InvalidRegressor(String),

    #[error("invalid component count {requested}: at most {max} components are available")]
    InvalidComponentCount { requested: usize, max: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("fitting diverged at iteration {iteration}: loss is not finite")]
    Divergence { iteration: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("text must not be empty")]
    EmptyText,

    #[error("embedding service unavailable: {0}")]
    EmbeddingUnavailable(String),

    #[error("embedding protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
