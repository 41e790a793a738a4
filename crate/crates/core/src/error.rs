use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("transport error: {0}")]
    Transport(String),

    /// The provider answered but the response could not be parsed into the
    /// template's output schema, even after retries.
    #[error("extraction error ({template}): {reason}")]
    Extraction {
        template: String,
        reason: String,
        raw: String,
    },

    #[error("planning error: {0}")]
    Planning(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("retrieval error: {0}")]
    Retrieval(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("no index at {0}")]
    NoIndex(PathBuf),

    #[error("index format version {found} is not supported (expected {expected}); migration needed")]
    MigrationNeeded { found: u32, expected: u32 },

    #[error("index corrupted: {0}")]
    Corruption(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
