use thiserror::Error;

/// Failures surfaced to the shell; each maps to an exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<hoi_core::Error> for CliError {
    fn from(e: hoi_core::Error) -> Self {
        use hoi_core::Error as E;
        match e {
            E::Config(m) | E::Shape(m) | E::InvalidParameter(m) => CliError::Config(m),
            E::Numerical(m) => CliError::Numerical(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
