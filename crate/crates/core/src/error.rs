use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    DegenerateRotation { angle: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected} values, got {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("height {height} m lies outside the grid z-range [{min}, {max}]")]
    SliceOutOfRange { height: f64, min: f64, max: f64 },

    #[error("map file: malformed header ({0})")]
    MalformedHeader(String),

    #[error("map file: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("map file: dimension mismatch ({0})")]
    DimensionMismatch(String),

    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("no path from start to goal")]
    NoPath,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("task sampling failed after {attempts} attempts")]
    TaskSampling { attempts: usize },

    #[error("tracking failure: no valid associations")]
    TrackingFailure,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
