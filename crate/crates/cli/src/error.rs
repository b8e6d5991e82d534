use std::path::{Path, PathBuf};

use seot_core::SeotError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A malformed file, with the 1-based line number when known.
    #[error("{}{}: {message}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse { path: PathBuf, line: Option<usize>, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] SeotError),
}

impl CliError {
    pub fn parse(path: &Path, line: Option<usize>, message: impl Into<String>) -> Self {
        CliError::Parse { path: path.to_path_buf(), line, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 3 for numerical failures inside the pipeline, 2 for everything the
    /// caller can fix by changing inputs or paths.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
