use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("crop leaves the image: {0}")]
    OutOfBounds(String),

    #[error("k-means needs at least {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },

    #[error("blend matrix at vertex {vertex} is singular (condition number {condition:e})")]
    SingularBlend { vertex: usize, condition: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
