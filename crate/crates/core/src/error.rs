use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid label {label} for {kind} loss (sample {index})")]
    InvalidLabel {
        kind: &'static str,
        label: f64,
        index: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is singular or too ill-conditioned (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("explicit inverse requested for {params} parameters (limit {limit})")]
    TooLarge { params: usize, limit: usize },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed binary file at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
