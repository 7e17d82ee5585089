use std::io;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point depth {depth} is not in front of the camera")]
    NonPositiveDepth { depth: f64 },

    #[error("quaternion norm {norm} deviates from unit length")]
    NotUnitQuaternion { norm: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is numerically singular (reciprocal condition {rcond:e})")]
    SingularMatrix { rcond: f64 },

    #[error("camera is inside the object of interest")]
    CameraInsideObject,

    #[error("oracle demonstration {demo} did not converge within {steps} steps")]
    OracleDiverged { demo: u64, steps: usize },

    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward called without a recorded forward pass: {0}")]
    GraphNotRecorded(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("trace has {len} steps, at least {needed} required")]
    TooShortTrace { len: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("weights fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
