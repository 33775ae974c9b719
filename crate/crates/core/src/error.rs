use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum AmssError {
    #[error("shape mismatch in {layer}: expected {expected:?}, got {actual:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("invalid model spec: {0}")]
    ModelSpec(String),

    #[error("invalid data spec: {0}")]
    DataSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("stale forward cache: cache was built at parameter version {cache}, model is at {model}")]
    StaleCache { cache: u64, model: u64 },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("mask plan does not match parameters: {0}")]
    PlanMismatch(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("{units} mask units exceed the exact enumeration limit of {limit}; estimate inclusion probabilities by Monte Carlo instead")]
    EnumerationTooLarge { units: usize, limit: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("schema error in {path}: {msg}")]
    Schema { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("epoch {epoch}, batch {batch}{}: {source}", modality.map(|k| format!(", modality {k}")).unwrap_or_default())]
    Training {
        epoch: usize,
        batch: usize,
        modality: Option<usize>,
        #[source]
        source: Box<AmssError>,
    },

    #[error("sweep cell ({row}, {col}): {source}")]
    SweepCell {
        row: usize,
        col: usize,
        #[source]
        source: Box<AmssError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AmssError>;
