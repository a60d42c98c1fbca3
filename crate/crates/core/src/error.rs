use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: range {start}..{end} out of bounds for length {len}")]
    Range {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("sequence generation failed: {0}")]
    Generation(String),
    #[error("training aborted at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("parse error in {what} at line {line}: {msg}")]
    Parse {
        what: String,
        line: usize,
        msg: String,
    },
    #[error("version mismatch: {0}")]
    Version(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
