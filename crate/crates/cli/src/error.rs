//! Error type distinguishing usage problems (exit code 2) from runtime
//! failures (exit code 1).

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, malformed config, missing prerequisites.
    Usage(String),
    /// Anything that went wrong while executing a well-formed request.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<previr_core::Error> for CliError {
    fn from(e: previr_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}
