use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("sequence length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("unknown token {0:?}")]
    Vocab(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("non-finite value detected in {0}")]
    Numeric(String),
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
