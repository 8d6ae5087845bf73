use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("foreground has zero variance")]
    ZeroVariance,
    #[error("region {roi} exceeds volume of shape {shape:?}")]
    OutOfBounds { roi: String, shape: [usize; 3] },
    #[error("slice has no foreground pixels")]
    EmptyForeground,
    #[error("target resolution {target} is not base {base} times a power of two")]
    NonDyadic { base: usize, target: usize },
    #[error("latent dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network is already at its target resolution {0}")]
    AlreadyAtTarget(usize),
    #[error("no parameter group matches selector `{0}`")]
    UnknownLayer(String),
    #[error("unfreeze schedule would release the output layer `{0}`")]
    ScheduleExhaustsFinalLayer(String),
    #[error("labelled budget {0} is not served by the multi-GAN path (expected 12 or 24)")]
    BadBudget(usize),
    #[error("empty pool: {0}")]
    EmptyPool(&'static str),
    #[error("bad count: {0}")]
    BadCount(String),
    #[error("a class is missing from a training fold")]
    DegenerateClass,
    #[error("differences have zero variance")]
    DegenerateVariance,
    #[error("missing results: {0}")]
    MissingResults(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("phase precondition failed: {0}")]
    Phase(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}
