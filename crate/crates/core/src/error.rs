use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AirError>;

#[derive(Debug, Error)]
pub enum AirError {
    #[error("vector norm {0:e} is below the zero-norm threshold")]
    ZeroNorm(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("empty set")]
    EmptySet,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("constant input: rank variance is zero")]
    ConstantInput,

    #[error("value {value} for `{name}` is outside [{lo}, {hi}]")]
    RangeError {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("not enough classes: need at least 2 with >= {min_images} images, found {found}")]
    InsufficientClasses { min_images: usize, found: usize },

    #[error("bad prompt initialization: {0}")]
    BadInit(String),

    #[error("image offset between anchors vanished (norm {0:e})")]
    ZeroImageOffset(f64),

    #[error("non-finite loss at iteration {t}")]
    NonFiniteLoss { t: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("parameter shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),

    #[error("bad distance matrix: {0}")]
    BadMatrix(String),

    #[error("K = {k} exceeds the number of points {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("covariance is not positive semi-definite (min eigenvalue {0:e})")]
    NonPsd(f64),

    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    TruncatedFile { path: PathBuf, expected: u64, found: u64 },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AirError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        AirError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
