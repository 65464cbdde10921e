//! CLI error type carrying the process exit code.

use std::fmt;

use vscout_core::Error as CoreError;

/// Exit code 2: malformed input (CSV, config, record, arguments).
/// Exit code 3: the pipeline itself failed.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Pipeline(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(msg) => write!(f, "{msg}"),
            CliError::Pipeline(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::DegenerateInput(_) | CoreError::InvalidConfig(_) => {
                CliError::Input(e.to_string())
            }
            other => CliError::Pipeline(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
