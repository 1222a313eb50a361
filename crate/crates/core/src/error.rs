use thiserror::Error;

/// Errors raised anywhere in the alignment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("invalid shape parameters: {0}")]
    InvalidShape(String),

    #[error("scene generation failed: {0}")]
    SceneGeneration(String),

    #[error("bounding box does not intersect the image")]
    EmptyRegion,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("compute graph lifecycle: {0}")]
    Lifecycle(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
