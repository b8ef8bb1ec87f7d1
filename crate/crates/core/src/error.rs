use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("conflicting readings for road {road} at {timestamp}: {first} vs {second}")]
    Conflict {
        road: String,
        timestamp: String,
        first: f64,
        second: f64,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown road: {0}")]
    UnknownRoad(String),

    #[error("roads without any valid observation: {}", .0.join(", "))]
    NoObservations(Vec<String>),

    #[error("{segment} segment has {len} steps, fewer than the {min}-step model window")]
    SplitTooShort {
        segment: &'static str,
        len: usize,
        min: usize,
    },

    #[error("missing value for road {road} at step {step}; fill the panel first")]
    MissingCell { road: String, step: usize },

    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("untestable: {0}")]
    Untestable(String),

    #[error("unit mismatch: {0} vs {1}")]
    UnitMismatch(String, String),

    #[error("snapshot error: {0}")]
    Snapshot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
