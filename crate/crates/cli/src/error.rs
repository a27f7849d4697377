use std::path::PathBuf;

/// Harness failures, each tied to a stable process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("missing run artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    /// 1 internal, 2 config, 3 I/O, 4 divergence, 5 missing checkpoint, 6 missing artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::MissingCheckpoint(_) => 5,
            CliError::MissingArtifact(_) => 6,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<lidnet::Error> for CliError {
    fn from(e: lidnet::Error) -> Self {
        use lidnet::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Validation(_) => CliError::Config(msg),
            E::Io { .. } | E::Format { .. } | E::Data(_) => CliError::Io(msg),
            E::Training { .. } => CliError::Diverged(msg),
            E::Contract(_) | E::Scheduling(_) | E::Invariant(_) => CliError::Internal(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
