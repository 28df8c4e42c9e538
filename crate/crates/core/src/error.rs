use std::path::PathBuf;

use popmech_autodiff::AutodiffError;

/// Everything that can go wrong in this crate.
///
/// Variants fall into three families that map onto process exit codes:
/// configuration problems, data problems and numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("data error in {context}: {msg}")]
    Data { context: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value {what} at {location}")]
    NonFinite { what: String, location: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn data(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            context: context.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn non_finite(what: impl Into<String>, location: impl Into<String>) -> Self {
        Error::NonFinite {
            what: what.into(),
            location: location.into(),
        }
    }

    /// Process exit code: 2 for configuration, 3 for data and i/o, 4 for numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Data { .. } | Error::Io { .. } => 3,
            Error::NonFinite { .. } | Error::Numeric(_) | Error::Autodiff(_) => 4,
        }
    }
}
