use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VatError>;

#[derive(Debug, Error)]
pub enum VatError {
    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("undefined divergence: q has mass {q:e} where p is {p:e} at cell {cell}")]
    UndefinedDivergence { cell: usize, q: f64, p: f64 },

    #[error("zero-probability conditioning event: {0}")]
    ZeroProbability(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("kind mismatch: {0}")]
    KindMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("dataset missing: {}", .0.display())]
    DatasetMissing(PathBuf),

    #[error("fingerprint mismatch for {path}: expected {expected}, found {found}")]
    FingerprintMismatch {
        path: String,
        expected: String,
        found: String,
    },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] ::image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl VatError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        VatError::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<toml::de::Error> for VatError {
    fn from(e: toml::de::Error) -> Self {
        VatError::Config(e.to_string())
    }
}
