use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Divergence { iteration: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found:?} (expected {expected:?})")]
    UnsupportedVersion { found: String, expected: String },

    #[error("ground truth has no boundary pixels; recall is undefined")]
    UndefinedRecall,

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) => 1,
            Error::Convergence { .. } | Error::Divergence { .. } => 3,
            Error::Format(_)
            | Error::UnsupportedVersion { .. }
            | Error::UndefinedRecall
            | Error::MissingFile(_)
            | Error::Io { .. } => 2,
        }
    }
}
