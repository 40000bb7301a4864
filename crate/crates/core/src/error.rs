use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("audit error: {0}")]
    Audit(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Load failures for the dataset and checkpoint binary formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("magic mismatch: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: Vec<u8> },

    #[error("truncated {0}")]
    Truncated(String),

    #[error("checksum mismatch on {what}: header {expected:08x}, computed {computed:08x}")]
    Checksum { what: String, expected: u32, computed: u32 },

    #[error("bad header: {0}")]
    Header(String),

    #[error("index overflow: {0}")]
    IndexOverflow(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
