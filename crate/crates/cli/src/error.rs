use nplm_core::NplmError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{summary}\n{diff}")]
    Fingerprint { summary: String, diff: String },

    #[error(transparent)]
    Core(#[from] NplmError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Fingerprint { .. } => 2,
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
