use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the reduced-order modelling pipeline.
#[derive(Debug, Error)]
pub enum SromError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Newton iteration did not converge at step {step} (residual {residual:.3e})")]
    SolverDivergence { step: usize, residual: f64 },

    #[error("non-finite state at step {step}")]
    Blowup { step: usize },

    #[error("trajectory {trajectory}: {source}")]
    Trajectory {
        trajectory: usize,
        #[source]
        source: Box<SromError>,
    },

    #[error("ill-posed regression system: {0}")]
    IllPosed(String),

    #[error("L-curve mesh error: {0}")]
    Mesh(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("incompatible dataset: {0}")]
    Incompatible(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SromError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SromError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SromError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SromError>;
