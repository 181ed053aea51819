use thiserror::Error;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or missing input file.
    #[error("{0}")]
    Usage(String),

    /// Invalid configuration value or key.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Run(#[from] colourgan::Error),

    /// Some sub-runs of a comparison failed.
    #[error("{failed} of {total} runs failed")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Run(colourgan::Error::Config(_)) => 2,
            CliError::Run(_) => 1,
            CliError::Partial { .. } => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(colourgan::Error::Data(e.to_string()))
    }
}
