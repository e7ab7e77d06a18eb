use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    /// Bad flags or flag combinations; reported with usage text.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] malmm_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("report {path}: {reason}")]
    Report { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, BenchError>;
