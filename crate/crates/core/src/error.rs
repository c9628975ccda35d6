use std::path::PathBuf;

use hynt_kernel::KernelError;
use thiserror::Error;

/// One malformed input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {} malformed line(s); first: {}", path.display(), errors.len(), errors[0])]
    Parse { path: PathBuf, errors: Vec<LineError> },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid date {year}-{month}-{day}")]
    Date { year: i32, month: u32, day: u32 },

    #[error("fact has no slot {0}")]
    SlotAbsent(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (instances {instances:?}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        instances: Vec<usize>,
        detail: String,
    },

    #[error("no {0} queries to evaluate")]
    EmptyQueries(&'static str),

    #[error("relation {0} has no normalization statistics")]
    UnknownRelation(String),

    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            Error::Kernel(KernelError::NonFinite { .. }) => ErrorClass::Numeric,
            Error::Kernel(KernelError::Io(_)) | Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
