//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. The variants map onto the
//! CLI exit codes: config/dimension/data/state errors exit 2, numeric
//! failures exit 3, I/O errors exit 4.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Shape or divisibility violation in a tensor operation.
    Dim(String),
    /// Invalid configuration: unknown key, bad value, unsupported combination.
    Config(String),
    /// Invalid data fed to an operation (e.g. label id outside the class range).
    Data(String),
    /// Tape or harness used out of order (e.g. backward before any forward).
    State(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Numeric(m) => write!(f, "numeric failure: {m}"),
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

macro_rules! err_ctor {
    ($fn_name:ident, $variant:ident) => {
        impl Error {
            pub fn $fn_name(msg: impl Into<String>) -> Self {
                Error::$variant(msg.into())
            }
        }
    };
}

err_ctor!(dim, Dim);
err_ctor!(config, Config);
err_ctor!(data, Data);
err_ctor!(state, State);
err_ctor!(numeric, Numeric);
