use thiserror::Error;

pub type Result<T, E = ConvError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ConvError {
    /// Filter does not fit the input, zero extents, or stride 0.
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad fixture: {0}")]
    Format(String),

    #[error("truncated fixture payload: expected {expected} values, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid tile plan: {0}")]
    Config(String),

    #[error("run needs {required} bytes but the memory limit is {limit} bytes")]
    OutOfMemory { required: u64, limit: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
