use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes violate an operation's precondition.
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("model build: {0}")]
    Build(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter set `{0}`")]
    UnknownParamSet(String),

    #[error("element index {index} out of bounds for `{set}` ({len} elements)")]
    IndexOutOfBounds { set: String, index: usize, len: usize },

    #[error("bit index {bit} out of range for {width}-bit value")]
    BitOutOfRange { bit: u32, width: u32 },

    #[error("value {value} not representable in {width} bits")]
    ValueOutOfRange { value: i64, width: u32 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("fault plan mismatch: expected {expected}, got {actual}")]
    PlanMismatch { expected: String, actual: String },

    #[error("pruning target {target} unreachable; maximum achievable reduction is {max_achievable:.4}")]
    UnreachableTarget { target: f64, max_achievable: f64 },

    #[error("malformed manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("blob {path}: declared {declared} bytes but shape implies {expected}")]
    ExtentMismatch {
        path: PathBuf,
        declared: usize,
        expected: usize,
    },

    #[error("blob {path}: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
