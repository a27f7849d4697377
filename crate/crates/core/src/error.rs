use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("training error at step {step} ({phase}): {msg}")]
    Training { step: u64, phase: String, msg: String },
    #[error("scheduling error: {0}")]
    Scheduling(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
