use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Every fallible operation in the pipeline funnels
/// into one of these variants so the driver can report failures per mixture
/// without aborting a whole batch.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or malformed audio format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("parse error in {path} at line {line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("trainer failure: {0}")]
    Trainer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
