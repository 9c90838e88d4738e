use std::path::PathBuf;

/// Error type shared by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("irregular timestamps at line {line}: expected step {expected}s, found {found}s")]
    Spacing { line: u64, expected: i64, found: i64 },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("computation error: {0}")]
    Computation(String),
    #[error("incompatible file: {0}")]
    Incompatible(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    /// Prefixes computation and dimension errors with the layer that raised them.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::Computation(msg) => Error::Computation(format!("{layer}: {msg}")),
            Error::Dimension(msg) => Error::Dimension(format!("{layer}: {msg}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
