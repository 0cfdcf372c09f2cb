use thiserror::Error;

pub type Result<T> = std::result::Result<T, MivError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MivError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data contract violation: {0}")]
    DataContract(String),

    #[error("no incomplete cases (R = 0) available to estimate the nonrespondent functional")]
    NoIncompleteCases,

    #[error("denominator {what} = {value:e} is below the floor {floor:e}")]
    DenominatorFloor {
        what: &'static str,
        value: f64,
        floor: f64,
    },

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("fold {fold}: {reason}")]
    Fold { fold: usize, reason: String },

    #[error("weak identification: {0}")]
    WeakIdentification(String),

    #[error("data generation failed: {0}")]
    Generation(String),
}
