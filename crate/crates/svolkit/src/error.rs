use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-stationary parameters: |delta| = {0} >= 1")]
    NonStationary(f64),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("inverse-gamma proposal degenerate: sigma2 = {0} below guard")]
    ProposalDegenerate(f64),

    #[error("nonpositive s': {0}")]
    NonPositiveSPrime(f64),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
