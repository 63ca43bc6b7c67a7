use std::path::PathBuf;

/// Errors surfaced by the public API.
#[derive(Debug, thiserror::Error)]
pub enum FuseError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("undefined statistic: {0}")]
    Degenerate(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {term} = {value}")]
    NonFinite {
        epoch: usize,
        step: usize,
        term: String,
        value: f64,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FuseError>;

impl FuseError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
