use thiserror::Error;

/// Errors raised by the inference engine and its analyses.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("cache incomplete: no entry for position {position} at layer {layer}")]
    CacheIncomplete { layer: usize, position: usize },

    #[error("cache state error: {0}")]
    State(String),

    #[error("scheduling deadlock at step {step}: {masked} masked positions but none eligible")]
    Deadlock { step: usize, masked: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
