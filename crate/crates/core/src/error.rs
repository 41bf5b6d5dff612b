use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid filter: {0}")]
    InvalidFilter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("image too small: {0}")]
    Size(String),

    /// A non-finite value showed up while computing `group`.
    #[error("non-finite value in {group}: {detail}")]
    Numeric { group: String, detail: String },

    #[error("unrecognized model format: {0}")]
    Format(String),

    #[error("corrupt model file: {0}")]
    Corruption(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed image file: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
