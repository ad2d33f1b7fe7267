use std::fmt;

/// Crate-wide error type.
///
/// Variants are grouped by what went wrong rather than where, so the CLI can
/// map them onto exit codes (usage / data / numeric) without inspecting
/// message strings.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Shape(String),
    /// Out-of-range index (token ids, slice bounds).
    Index(String),
    /// Invalid configuration value or unknown config key.
    Config(String),
    /// An operation contract was violated (degenerate attention mask,
    /// shape-changing sublayer function, missing BOS, ...).
    Contract(String),
    /// Malformed corpus, checkpoint, or other on-disk data.
    Data(String),
    /// Non-finite values where finite ones are required (diverged training,
    /// failed gradient check).
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric failure: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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

pub type Result<T> = std::result::Result<T, Error>;
