use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding a binary feature store or checkpoint.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: Vec<u8>,
    },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: u64, version: u16 },
    #[error("unknown tag {tag} at offset {offset}")]
    UnknownTag { offset: u64, tag: u8 },
    #[error("dimension mismatch at offset {offset}: expected {expected}, found {found}")]
    DimensionMismatch {
        offset: u64,
        expected: usize,
        found: usize,
    },
    #[error(
        "truncated payload at offset {offset}: needed {needed} more bytes, {available} available"
    )]
    Truncated {
        offset: u64,
        needed: usize,
        available: usize,
    },
    #[error("invalid utf-8 identifier at offset {offset}")]
    InvalidUtf8 { offset: u64 },
    #[error("non-finite value at offset {offset}")]
    NonFinite { offset: u64 },
    #[error("duplicate identifier {id:?} at offset {offset}")]
    DuplicateId { offset: u64, id: String },
    #[error("{extra} trailing bytes after last record at offset {offset}")]
    TrailingBytes { offset: u64, extra: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("format error in {path}: {source}")]
    Format {
        path: String,
        #[source]
        source: FormatError,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
