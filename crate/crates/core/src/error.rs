use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An episode or environment violates a structural invariant.
    #[error("malformed episode: {0}")]
    Validation(String),

    #[error("index {index} out of range (limit {limit})")]
    Range { index: usize, limit: usize },

    #[error("invalid config: {0}")]
    Config(String),

    /// A DBENCH1 file (or params file) failed to parse.
    #[error("format error at line {line}: {field}: {message}")]
    Format {
        line: usize,
        field: String,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at episode {episode}: loss = {loss}")]
    Training { episode: usize, loss: f64 },

    #[error("mean over an empty set: {0}")]
    UndefinedMean(String),
}

impl Error {
    pub(crate) fn format(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            line,
            field: field.into(),
            message: message.into(),
        }
    }
}
