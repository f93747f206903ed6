//! Error type for the pipeline binary. Variants split along the exit-code
//! contract: usage mistakes (exit 2) versus runtime failures (exit 1).

use std::fmt;
use std::io;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Bad flags, bad config keys, missing input files. Exit code 2.
    Usage(String),
    /// An input path that must exist does not. Exit code 2.
    MissingInput(PathBuf),
    /// IO failure on a file we already started reading or writing.
    Io { path: PathBuf, source: io::Error },
    /// A binary container is malformed or has the wrong magic/version.
    Format { path: PathBuf, reason: String },
    /// Propagated failure from the numeric layer.
    Core(bgch_core::Error),
    /// A validator found a counterexample.
    Validation(String),
}

impl Error {
    /// Exit code per the CLI contract: 0 success, 1 runtime or validation
    /// failure, 2 usage error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::MissingInput(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::MissingInput(path) => {
                write!(f, "usage error: input file not found: {}", path.display())
            }
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Format { path, reason } => write!(f, "{}: {reason}", path.display()),
            Error::Core(e) => write!(f, "{e}"),
            Error::Validation(msg) => write!(f, "validation failure: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Core(e) => Some(e),
            _ => None,
        }
    }
}

impl From<bgch_core::Error> for Error {
    fn from(e: bgch_core::Error) -> Self {
        Error::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attaches the offending path to a raw IO error.
pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
