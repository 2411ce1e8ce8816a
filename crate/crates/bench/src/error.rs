use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("n = {n} exceeds the exact-oracle cap of {cap}")]
    OracleTooLarge { n: usize, cap: usize },
    #[error(transparent)]
    Core(#[from] knn_attention::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::InvalidSpec(_) => 2,
            BenchError::OracleTooLarge { .. } => 3,
            BenchError::Core(knn_attention::Error::InvalidParameter(_) | knn_attention::Error::Shape(_)) => 2,
            _ => 1,
        }
    }
}

pub type BenchResult<T> = std::result::Result<T, BenchError>;
