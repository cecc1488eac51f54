use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("routing error: unknown skill id {0}")]
    Routing(u32),

    #[error("knowledge block of {len} tokens does not fit budget of {budget}")]
    KnowledgeTooLarge { len: usize, budget: usize },

    #[error("spec error: {0}")]
    Spec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate training data: {0}")]
    Degenerate(String),

    #[error("isolation audit failed: {0}")]
    Isolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
