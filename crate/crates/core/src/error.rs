//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum. Each variant maps to a stable machine-readable
/// category (see [`Error::category`]) which the CLI prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside its documented domain.
    #[error("parameter: {0}")]
    Parameter(String),
    /// Array dimensions do not line up.
    #[error("shape: {0}")]
    Shape(String),
    /// A cross-argument constraint is violated (e.g. alpha + beta != 1).
    #[error("constraint: {0}")]
    Constraint(String),
    /// A value fails a schema check (e.g. style features carrying a query).
    #[error("validation: {0}")]
    Validation(String),
    /// A requested cache entry is absent.
    #[error("cache miss: {0}")]
    CacheMiss(String),
    /// A cache entry already exists under the same key.
    #[error("duplicate cache entry: {0}")]
    DuplicateEntry(String),
    /// A serialized file does not match the expected layout.
    #[error("format: {message} (byte offset {offset})")]
    Format { offset: u64, message: String },
    /// A serialized file was written by an incompatible version.
    #[error("version: cache file version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    /// A hook names an attention site the backend does not expose.
    #[error("site: unknown attention site '{0}'")]
    UnknownSite(String),
    /// A backend or job configuration is invalid.
    #[error("config: {0}")]
    Config(String),
    /// An external backend adapter violates the adapter contract.
    #[error("adapter: {0}")]
    AdapterContract(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(String),
}

impl Error {
    /// Stable category slug for machine-parseable error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Shape(_) => "shape",
            Error::Constraint(_) => "constraint",
            Error::Validation(_) => "validation",
            Error::CacheMiss(_) => "cache-miss",
            Error::DuplicateEntry(_) => "duplicate-entry",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::UnknownSite(_) => "site",
            Error::Config(_) => "config",
            Error::AdapterContract(_) => "adapter",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
