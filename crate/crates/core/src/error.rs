use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    Shape(String),
    /// A NaN or infinity appeared where only finite values are allowed.
    NonFinite(&'static str),
    /// `backward` misuse (non-scalar loss, repeated call without reset, ...).
    Backward(&'static str),
    /// A parameter or configuration value is outside its valid range.
    Config(String),
    /// Input data cannot be used (empty sets, single-class labels, ...).
    Data(String),
    /// Randomized generation failed after the allowed number of retries.
    Exhausted(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite(ctx) => write!(f, "non-finite value in {ctx}"),
            Error::Backward(msg) => write!(f, "backward: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Data(msg) => write!(f, "invalid data: {msg}"),
            Error::Exhausted(what) => write!(f, "retries exhausted: {what}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, data_err, shape_err};
