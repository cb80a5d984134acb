use std::path::PathBuf;

use thiserror::Error;

/// Why a binary file could not be decoded.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("file ends early: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("declared size overflows: {0}")]
    Overflow(String),
    #[error("{0} trailing bytes after the last record")]
    Trailing(usize),
    #[error("invalid record: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{context}: {source}")]
    Core { context: String, source: glass_core::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 2 config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        use glass_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Core { source: C::Config(_), .. } => 2,
            Error::Core { source: C::NonFinite(_) | C::Backward(_), .. } => 4,
            _ => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

impl From<glass_core::Error> for Error {
    fn from(source: glass_core::Error) -> Self {
        Error::Core { context: "core".into(), source }
    }
}

/// Attach a context string to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, glass_core::Error> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Core { context: what(), source })
    }
}

macro_rules! config {
    ($($t:tt)*) => { $crate::error::Error::Config(format!($($t)*)) };
}
macro_rules! data {
    ($($t:tt)*) => { $crate::error::Error::Data(format!($($t)*)) };
}
pub(crate) use {config, data};
