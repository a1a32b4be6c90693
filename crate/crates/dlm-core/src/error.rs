use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (bad time
    /// range, MASK where a clean token is required, and so on).
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or sequence shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A computation produced NaN/inf where finiteness is a contract.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged; carries diagnostics for the abort message.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Configuration rejected during validation.
    #[error("config error: {0}")]
    Config(String),

    /// Tokenizer met a symbol outside the vocabulary.
    #[error("unknown symbol {symbol:?} at char offset {offset}")]
    UnknownSymbol { symbol: char, offset: usize },

    /// Checkpoint bytes malformed or produced by an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
