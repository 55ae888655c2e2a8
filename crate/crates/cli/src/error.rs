use thiserror::Error;

/// Failures surfaced to the shell, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] setseq_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for configuration problems, 3 for missing or malformed data, 4 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        use setseq_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) | CliError::Json(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Numeric(_) | E::Undefined(_) => 4,
                E::Domain(_) | E::Shape { .. } | E::Format(_) | E::Io(_) | E::Json(_) => 3,
            },
        }
    }
}
