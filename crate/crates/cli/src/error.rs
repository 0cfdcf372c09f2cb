use miv_core::MivError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data contract violation: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] MivError),

    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for data problems, 3 for estimation failures, 4 for configuration errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 2,
            CliError::Config(_) => 4,
            CliError::Output { .. } => 4,
            CliError::Core(e) => match e {
                MivError::DataContract(_) => 2,
                MivError::Config(_) => 4,
                MivError::NoIncompleteCases
                | MivError::DenominatorFloor { .. }
                | MivError::Fit(_)
                | MivError::Fold { .. }
                | MivError::WeakIdentification(_)
                | MivError::Generation(_) => 3,
            },
        }
    }
}
