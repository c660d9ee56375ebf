use std::path::PathBuf;

use pda_core::Error as CoreError;
use thiserror::Error;

/// Failures of a command, each mapped to a stable exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("task validation failed:\n  {}", .0.join("\n  "))]
    Task(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    MissingLabels(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Task(_) => 3,
            CliError::Shape(_) => 4,
            CliError::MissingLabels(_) => 5,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::Task(_)
                | CoreError::InvalidDataset(_)
                | CoreError::LabelOutOfRange { .. } => 3,
                CoreError::Dimension(_) => 4,
                CoreError::LabelsRequired(_) => 5,
                _ => 1,
            },
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
            // the core message already carries the "invalid config" prefix
            CoreError::Config(m) => CliError::Config(m),
            CoreError::Task(v) => CliError::Task(v),
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
