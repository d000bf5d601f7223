//! Command implementations behind the `qlode` binary: declarative config
//! files, CSV dataset I/O, bundled experiment presets and the three
//! subcommands (simulate, fit, study).

pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod presets;

/// CLI error category, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Usage or configuration problems (exit 1).
    Usage(String),
    /// Dataset I/O or schema problems (exit 2).
    Data(String),
    /// Numeric failures during estimation (exit 3).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message())
    }
}

impl std::error::Error for CliError {}

impl From<qlode::Error> for CliError {
    fn from(e: qlode::Error) -> Self {
        match e {
            qlode::Error::Config(m) => CliError::Usage(m),
            qlode::Error::Domain(m) => CliError::Data(m),
            qlode::Error::Numeric(m) => CliError::Numeric(m),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
