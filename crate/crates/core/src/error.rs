use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was called with arguments that violate its contract
    /// (dimension mismatches, empty inputs, out-of-range ids).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration is internally inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training aborted at step {step}: {detail}")]
    TrainingAbort { step: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file did not match its documented on-disk format.
    #[error("{path}: malformed {what}: {detail}")]
    Format {
        path: PathBuf,
        what: &'static str,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            what,
            detail: detail.into(),
        }
    }
}
