use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
///
/// Variants map onto the coarse categories the command line reports, see
/// [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("bad format: {0}")]
    Format(String),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Machine-readable error class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) => Category::Usage,
            Error::Numeric(_) => Category::Numeric,
            Error::Shape(_)
            | Error::Degenerate(_)
            | Error::Format(_)
            | Error::Truncated(_)
            | Error::Data(_)
            | Error::Io(_) => Category::Data,
        }
    }

    /// Short lowercase tag naming the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Degenerate(_) => "degenerate",
            Error::Format(_) => "format",
            Error::Truncated(_) => "truncated",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
