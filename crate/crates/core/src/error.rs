use thiserror::Error;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("batch of size {0} has no negatives")]
    NoNegatives(usize),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error for `{id}`: {msg}")]
    Validation { id: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input (files, flags, configs) rather
    /// than by a failure while running the pipeline.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Checkpoint(_)
                | Error::Config(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
