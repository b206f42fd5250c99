use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the numerical core, the trainers and the I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (schedule exhausted at jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("triangular matrix has a zero diagonal entry at index {index}")]
    SingularTriangular { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("cannot parse value at row {row}, column `{col}`: {value:?}")]
    ParseError { row: usize, col: String, value: String },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid plot: {0}")]
    BadPlot(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("model file: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
