use std::fmt;

/// Errors raised across the crate.
///
/// The variants are coarse on purpose: callers (the CLI in particular) map
/// them onto exit codes, so each kind corresponds to one class of failure.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes or dimensions.
    Dimension(String),
    /// A scalar or structural parameter is out of its valid range.
    Parameter(String),
    /// An API was used outside its contract (e.g. backward on a non-scalar).
    Contract(String),
    /// An object is not in the state an operation requires.
    State(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// A file does not follow the expected byte layout.
    Format(String),
    /// A file was written by an incompatible format version.
    Version { found: u32, expected: u32 },
    /// A file ended before its declared contents.
    Truncated(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Parameter(msg) => write!(f, "parameter error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Version { found, expected } => {
                write!(f, "unsupported format version {found} (expected {expected})")
            }
            Error::Truncated(msg) => write!(f, "truncated file: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
