use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] matforge::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration and argument problems, 3 for non-finite
    /// numerics, 4 for I/O and malformed files.
    pub fn exit_code(&self) -> ExitCode {
        use matforge::Error as E;
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Invalid(_) | E::Shape { .. }) => 2,
            CliError::Core(E::NonFinite(_)) => 3,
            CliError::Core(E::Io(_) | E::Image(_) | E::Format(_)) | CliError::Io(_) => 4,
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;
