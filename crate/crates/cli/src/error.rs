use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] otrecon_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A numerical check ran to completion and missed its tolerance.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 for numerical breakdown or failed checks, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::CheckFailed(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
