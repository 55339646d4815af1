use std::path::PathBuf;

use dair_core::Error as CoreError;

/// Errors of the command-line layer, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const SHAPE: i32 = 5;
    pub const NUMERIC: i32 = 6;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => exit::IO,
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) | CliError::Checkpoint(_) => exit::DATA,
            CliError::Shape(_) => exit::SHAPE,
            CliError::Numeric(_) => exit::NUMERIC,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Shape(m) => CliError::Shape(m),
            CoreError::Parameter(m) | CoreError::Config(m) => CliError::Config(m),
            CoreError::Data(m) => CliError::Data(m),
            CoreError::Numeric(m) => CliError::Numeric(m),
            CoreError::MissingArray(m) => CliError::Checkpoint(format!("missing array `{m}`")),
        }
    }
}
