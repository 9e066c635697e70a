//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by volume I/O, artefact simulation, and training.
#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular transform (det = {det})")]
    SingularTransform { det: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("{0}")]
    Metric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
