//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor / layer shape mismatch. Carries both offending shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid configuration or CLI arguments (exit code 2).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required (exit code 3).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed input file.
    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// Camera model we do not ingest.
    #[error("unsupported camera model: {0} (only PINHOLE and SIMPLE_PINHOLE)")]
    UnsupportedCameraModel(String),

    /// Structured file with the wrong layout (PLY, checkpoint, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Empty input where at least one element is required.
    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code contract: 0 ok, 1 runtime, 2 config, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}
