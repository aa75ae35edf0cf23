use thiserror::Error;
use zia_core::ZiaError;

/// Failures of a CLI command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Diagnostics(Vec<String>),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(ZiaError),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Diagnostics(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_FAILURE,
            CliError::Core(e) => match e {
                ZiaError::Config(_) | ZiaError::Argument(_) => EXIT_CONFIG,
                ZiaError::Numerical(_) | ZiaError::Invariant(_) => EXIT_NUMERICAL,
                ZiaError::Io(_) | ZiaError::Csv(_) | ZiaError::Json(_) => EXIT_FAILURE,
            },
        }
    }
}

impl From<ZiaError> for CliError {
    fn from(e: ZiaError) -> Self {
        CliError::Core(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(ZiaError::Csv(e))
    }
}
