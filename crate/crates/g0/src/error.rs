use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// contract/config violations exit 1, I/O and format errors exit 2.
#[derive(Error, Debug)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad or missing configuration (unknown task template, malformed key, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed on-disk artifact (bad magic, truncation, version skew).
    #[error("format error in {path}: {detail} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI: 1 for contract/config, 2 for I/O/format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 1,
            Error::Format { .. } | Error::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
