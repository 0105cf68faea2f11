use std::fmt;

/// Everything that can go wrong inside the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor extents do not fit the operation.
    Dimension(String),
    /// An index (word id, quadrant, exemplar) is out of range.
    Index(String),
    /// A hyperparameter is outside its legal range.
    Parameter(String),
    /// Malformed file header or encoding.
    Format(String),
    /// Payload shorter or longer than its header declares.
    Length(String),
    /// A decoded value is outside its domain.
    Value(String),
    /// Two inputs that must agree do not.
    Consistency(String),
    /// A dataset is missing required content.
    Data(String),
    /// An operation was called in a context where it is not meaningful.
    Usage(String),
    /// Invalid experiment or dataset configuration.
    Config(String),
    /// Trial generation could not satisfy its constraints.
    Generation(String),
    /// Evaluation protocol violated.
    Protocol(String),
    /// Gradient verification could not be carried out.
    Verification(String),
    /// Invalid scene specification.
    Spec(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Length(m) => write!(f, "length error: {m}"),
            Error::Value(m) => write!(f, "value error: {m}"),
            Error::Consistency(m) => write!(f, "consistency error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Generation(m) => write!(f, "generation error: {m}"),
            Error::Protocol(m) => write!(f, "protocol error: {m}"),
            Error::Verification(m) => write!(f, "verification error: {m}"),
            Error::Spec(m) => write!(f, "scene spec error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(std::io::Error::other(e))
    }
}
