use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or arguments (exit code 2).
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] phantom_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(phantom_core::Error::Config(_) | phantom_core::Error::VocabExhausted { .. }) => 2,
            _ => 1,
        }
    }
}
