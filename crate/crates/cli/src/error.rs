use std::path::Path;

/// Command failure, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, arguments or input files; exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Failure while running a valid configuration; exit code 3.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// The message without the kind prefix.
    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

/// Core errors raised while validating inputs are configuration errors.
pub fn invalid(e: jlab::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Core errors raised while running are runtime errors.
pub fn runtime(e: jlab::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

pub type CliResult<T> = std::result::Result<T, CliError>;
