use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid dimensions {0}x{1}x{2}")]
    InvalidDims(usize, usize, usize),

    #[error("grid dimension mismatch: {0} vs {1}")]
    DimMismatch(String, String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("malformed file {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("output already exists: {} (use --force to overwrite)", .0.display())]
    OutputExists(PathBuf),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
