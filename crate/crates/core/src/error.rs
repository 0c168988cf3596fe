use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("step {t} outside budget 0..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("t_max must be at least 1")]
    ZeroBudget,
    #[error("embedding dimension {0} is below the minimum of 8")]
    DimensionTooSmall(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("episode is already terminal")]
    TerminalState,
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("corrupt {what}: {reason}")]
    Corrupt { what: String, reason: String },
    #[error("unknown question id {0}")]
    UnknownQuestion(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
