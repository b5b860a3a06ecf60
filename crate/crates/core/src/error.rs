use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform; `axis` names the offending dimension.
    #[error("dimension mismatch in {op} on axis {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        actual: String,
    },

    #[error("invalid argument to {op}: {msg}")]
    Argument { op: &'static str, msg: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("events out of order at line {line}: t={t} follows t={prev}")]
    Ordering { line: usize, t: u64, prev: u64 },

    #[error("event at (x={x}, y={y}) lies outside the {width}x{height} sensor")]
    Bounds {
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },

    #[error("no ground-truth frame within {tolerance} us of window end {target} us (nearest: {nearest:?})")]
    Alignment {
        target: u64,
        tolerance: u64,
        nearest: Option<u64>,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl ToString,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn arg(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Argument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
