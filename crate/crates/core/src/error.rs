//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// An operation rejected its input (wrong shape, extent, or value range).
    InvalidInput { op: &'static str, reason: String },
    /// Rejection sampling could not find a qualifying window.
    SamplingExhausted { attempts: u32 },
    /// A numeric computation produced non-finite values.
    NonFinite { context: String },
    /// Training aborted (diverging loss or non-finite gradients).
    Diverged { epoch: usize, detail: String },
    /// A file did not match its expected format.
    Parse { location: String, reason: String },
    /// An I/O operation failed; the path names the offending file.
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            reason: reason.into(),
        }
    }

    pub fn parse(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for bad input, 2 for runtime aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput { op, reason } => write!(f, "{op}: rejected input: {reason}"),
            Error::SamplingExhausted { attempts } => {
                write!(f, "no qualifying window after {attempts} rejection attempts")
            }
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Diverged { epoch, detail } => {
                write!(f, "training aborted at epoch {epoch}: {detail}")
            }
            Error::Parse { location, reason } => write!(f, "parse error at {location}: {reason}"),
            Error::Io { path, source } => write!(f, "I/O error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
