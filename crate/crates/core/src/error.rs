use thiserror::Error;

/// Errors raised by the laboratory primitives.
#[derive(Debug, Error)]
pub enum LabError {
    /// An argument lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A loss or log-probability evaluated to a non-finite value.
    #[error("non-finite value at item {index}: {what}")]
    Numeric { index: usize, what: String },
    /// Batch too small or otherwise unsuitable for a quantile partition.
    #[error("partition error: {0}")]
    Partition(String),
    /// A caller broke an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Parameter/gradient layouts disagree.
    #[error("layout mismatch: {0}")]
    Layout(String),
    /// Alignment probe could not produce a measurement.
    #[error("probe error: {0}")]
    Probe(String),
    /// Synthetic data generation failed.
    #[error("generation error: {0}")]
    Generation(String),
    /// Training aborted.
    #[error("training aborted at step {step}: {reason}")]
    TrainingAbort { step: u64, reason: String },
    /// Malformed checkpoint or record.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
