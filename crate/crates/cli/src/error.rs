use std::fmt;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or paths; exit code 1.
    Config(String),
    /// Failure while running a valid command; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ml2::Error> for CliError {
    fn from(e: ml2::Error) -> Self {
        match e {
            ml2::Error::Config(_) | ml2::Error::Spec(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
