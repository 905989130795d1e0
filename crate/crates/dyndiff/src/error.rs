use thiserror::Error;

/// Unified error type for the whole engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("data: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("forecast: {0}")]
    Forecast(String),

    #[error("evaluate: {0}")]
    Evaluate(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
