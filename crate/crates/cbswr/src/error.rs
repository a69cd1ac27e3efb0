use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library. CLI commands map these onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("degenerate embedding: pre-normalization norm {norm:e} is below 1e-12")]
    DegenerateEmbedding { norm: f64 },

    #[error("internal consistency error: no centroid for assigned cluster {cluster}")]
    MissingCentroid { cluster: usize },

    #[error("degenerate denominator: fewer than two active centroids")]
    DegenerateDenominator,

    #[error("invalid usage: {0}")]
    Usage(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite value in {component}: {value}")]
    NonFinite { component: &'static str, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data container error: {0}")]
    Container(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
