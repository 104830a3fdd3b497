//! Crate-wide error type.
//!
//! Four failure families show up in practice: shape/dimension mismatches caught when an
//! op is recorded, invalid configurations, contract violations (calling an API out of
//! order or with out-of-domain arguments), and bad runtime input (files, corpora,
//! checkpoints). They are kept as one enum so library calls can return a single
//! `Result` and the CLI can map every failure onto its exit codes.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Shapes or extents that do not line up, detected when recording an op.
    Dim(String),
    /// An invalid model or training configuration.
    Config(String),
    /// An API used out of order or outside its documented domain.
    Contract(String),
    /// Bad runtime input: corpus, config file, checkpoint, CLI argument values.
    Input(String),
    /// A numeric evaluation produced a non-finite value where one is not allowed.
    Eval(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Eval(msg) => write!(f, "evaluation error: {msg}"),
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

macro_rules! err {
    ($kind:ident, $($arg:tt)*) => {
        $crate::error::Error::$kind(format!($($arg)*))
    };
}
pub(crate) use err;
