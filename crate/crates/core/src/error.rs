use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor has {values} values but shape {shape:?} requires {expected}")]
    BadTensor {
        shape: Vec<usize>,
        values: usize,
        expected: usize,
    },

    #[error("cannot sample from an empty sequence")]
    EmptySequence,

    #[error("loss fragment must return a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("feature file {path}: bad magic bytes {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("feature file {path}: unsupported version {version}")]
    BadVersion { path: PathBuf, version: u16 },

    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("feature file {path}: non-finite value at timestep {timestep}, channel {channel}")]
    NonFiniteFeature {
        path: PathBuf,
        timestep: usize,
        channel: usize,
    },

    #[error("feature file {path}: empty sequence (T' = 0)")]
    EmptyFeatureFile { path: PathBuf },

    #[error("checkpoint parameter {name}: {reason}")]
    Checkpoint { name: String, reason: String },

    #[error("video id sets differ; only in predictions: {only_preds:?}, only in ground truth: {only_gts:?}")]
    VideoMismatch {
        only_preds: Vec<String>,
        only_gts: Vec<String>,
    },

    #[error("non-finite loss in component {component} (value {value})")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
