use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("empty region: the mask selects no pixels")]
    EmptyRegion,
    #[error("no background reference: mask is entirely foreground")]
    NoBackground,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
