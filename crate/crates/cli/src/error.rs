use thiserror::Error;

/// Failure classes of a run, each with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags, paths or input files.
    #[error("config error: {0}")]
    Config(String),
    /// NaN/Inf during training or evaluation.
    #[error("numeric abort: {0}")]
    Numeric(String),
    /// A verification harness ran but its check did not pass.
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Check(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Check(m) => m,
        }
    }
}

impl From<spikegrad::Error> for CliError {
    fn from(e: spikegrad::Error) -> Self {
        match e {
            spikegrad::Error::NonFinite(m) => CliError::Numeric(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}
