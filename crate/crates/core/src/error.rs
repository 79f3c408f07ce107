use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate universe: {0}")]
    DegenerateUniverse(String),

    #[error("degenerate search space: {0}")]
    DegenerateSpace(String),

    #[error("index {index} out of range for cache of {len} items")]
    Lookup { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure in {block}: {detail}")]
    Numerical { block: String, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state corruption: {0}")]
    StateCorruption(String),

    #[error("incomplete log: {0}")]
    IncompleteLog(String),

    #[error("incomparable runs: {0}")]
    IncomparableRuns(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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

    pub fn numerical(block: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            block: block.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
