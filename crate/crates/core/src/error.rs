use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot draw {requested} distinct indices from a population of {available}")]
    InsufficientPopulation { requested: usize, available: usize },
    #[error("weights do not define a distribution (total = {total})")]
    DegenerateWeights { total: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
