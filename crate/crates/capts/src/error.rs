use std::path::{Path, PathBuf};

use capts_core::Error as CoreError;

/// Failure classes of the command line; each maps to its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("{path}: malformed file: {what}")]
    Format { path: PathBuf, what: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid data: {0}")]
    Data(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_IO: i32 = 3;
    pub const EXIT_NUMERICAL: i32 = 4;
    pub const EXIT_DATA: i32 = 5;

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, what: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), what: what.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::Io { .. } | CliError::Exists(_) | CliError::Format { .. } => Self::EXIT_IO,
            CliError::Numerical(_) => Self::EXIT_NUMERICAL,
            CliError::Data(_) => Self::EXIT_DATA,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => CliError::Config(m),
            e @ CoreError::Diverged { .. } => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}
