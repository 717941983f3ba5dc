//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty grid: holes exclude every label")]
    EmptyGrid,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image has no inverted mass (all background)")]
    ZeroMass,

    #[error("unknown activation tap '{0}'")]
    UnknownTap(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { loss: f64, step: usize },

    #[error("zero variance in {axis} labels, R^2 undefined")]
    ZeroLabelVariance { axis: &'static str },

    #[error("non-finite values in activations")]
    NonFiniteActivations,

    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
