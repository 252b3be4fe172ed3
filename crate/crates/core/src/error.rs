use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical failure after {iterations} sweeps (residual {residual:e})")]
    NumericalFailure { iterations: usize, residual: f64 },
    #[error("region explosion: more than {cap} breakpoints on the segment")]
    RegionExplosion { cap: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingFailure { epoch: usize, loss: f64 },
    #[error("format error: expected {expected}, found {actual}")]
    Format { expected: String, actual: String },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
