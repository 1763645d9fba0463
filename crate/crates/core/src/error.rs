use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("vertex {0} has no incident triangle")]
    IsolatedVertex(usize),

    #[error("triangle {0} is degenerate (zero area)")]
    DegenerateTriangle(usize),

    #[error("mask has zero variance and cannot be standardized")]
    ZeroVariance,

    #[error("camera row {0} has zero norm; viewing direction is undefined")]
    ZeroNormRow(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error in section `{section}`: {message}")]
    Parse { section: String, message: String },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("ill-posed fit: {visible} visible landmarks, at least {required} required")]
    IllPosed { visible: usize, required: usize },

    #[error("loss diverged (non-finite) at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("forward record does not match the inputs: {0}")]
    MismatchedRecord(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
