use std::fmt;

use flipbench_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;
pub const EXIT_HASH_MISMATCH: u8 = 5;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn config_error(msg: impl fmt::Display) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error: anyhow::anyhow!("{msg}"),
    }
}

pub fn data_error(msg: impl fmt::Display) -> Failure {
    Failure {
        code: EXIT_DATA,
        error: anyhow::anyhow!("{msg}"),
    }
}

pub fn hash_mismatch(what: &str, expected: &str, actual: &str) -> Failure {
    Failure {
        code: EXIT_HASH_MISMATCH,
        error: anyhow::anyhow!("{what} was produced for model {expected}, current model is {actual}"),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_)
            | Error::UnknownParamSet(_)
            | Error::BitOutOfRange { .. }
            | Error::UnreachableTarget { .. } => EXIT_CONFIG,
            Error::PlanMismatch { .. } => EXIT_HASH_MISMATCH,
            Error::Manifest { .. }
            | Error::ExtentMismatch { .. }
            | Error::TruncatedBlob { .. }
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::ShapeMismatch { .. }
            | Error::Empty(_) => EXIT_DATA,
            _ => EXIT_INTERNAL,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_DATA,
            error: e.into(),
        }
    }
}

pub trait Context<T> {
    fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Result<T, Failure>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Result<T, Failure> {
        self.map_err(|e| {
            let f: Failure = e.into();
            Failure {
                code: f.code,
                error: f.error.context(msg),
            }
        })
    }
}
