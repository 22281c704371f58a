use thiserror::Error;

/// Errors produced by the training, data, and evaluation pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate mixture fit: {0}")]
    DegenerateFit(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("unsupported mode: {0}")]
    Unsupported(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
