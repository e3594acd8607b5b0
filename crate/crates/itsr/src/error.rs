use std::path::{Path, PathBuf};

/// Errors surfaced by the command line, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] itsr_core::Error),
    #[error("{0}")]
    Failed(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        CliError::Format {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    /// 0 success, 1 failed check or computation, 2 usage, 3 I/O or file format.
    pub fn exit_code(&self) -> i32 {
        use itsr_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Core(E::Config(_) | E::Lookup(_)) => 2,
            CliError::Core(_) | CliError::Failed(_) => 1,
        }
    }
}
