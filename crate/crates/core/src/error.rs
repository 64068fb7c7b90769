use thiserror::Error;

/// Errors surfaced by the forecasting toolkit.
#[derive(Error, Debug)]
pub enum CatsError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration value (bad hyperparameter, kernel size, ratio...).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion or generation failure.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CatsError>;

impl CatsError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CatsError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
