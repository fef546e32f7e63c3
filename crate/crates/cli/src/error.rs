use polab::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration value; `field` is a dotted path such as `task.vocab_size`.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    /// Bad command-line input or missing prerequisite artifacts.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Abort(LabError),
    #[error("cannot load checkpoint {path}: {source}")]
    CheckpointLoad { path: String, source: LabError },
    #[error(transparent)]
    Lab(LabError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { field: field.into(), message: message.into() }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::Abort(_) => 3,
            CliError::CheckpointLoad { .. } => 4,
            CliError::Lab(_) | CliError::Io { .. } | CliError::Json(_) => 1,
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::TrainingAbort { .. } => CliError::Abort(e),
            other => CliError::Lab(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
