use std::fmt;

/// CLI failure, mapped onto the process exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad configuration or arguments (exit 1).
    Validation(String),
    /// Failure while running or reading/writing files (exit 2).
    Runtime(String),
    /// Self-test found failing checks (exit 3).
    SelftestFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::SelftestFailed(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::SelftestFailed(n) => write!(f, "selftest failed: {n} check(s) failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<d2cache::Error> for CliError {
    fn from(e: d2cache::Error) -> Self {
        match e {
            d2cache::Error::Config(m) => CliError::Validation(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
