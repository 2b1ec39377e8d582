//! Error types shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad spec fields, incompatible head/bundle, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (empty lists, length mismatches, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A zero-norm vector reached a cosine computation; signals an encoder bug upstream.
    #[error("degenerate vector: zero norm in cosine similarity")]
    DegenerateVector,

    /// Operation requested on a bundle that does not support it.
    #[error("unsupported bundle: {0}")]
    UnsupportedBundle(String),

    /// Nonfinite values encountered during optimization or evaluation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Requested resource does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// Cached artifact failed digest verification.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Hub source unreachable with a cold cache.
    #[error("network error: {0}")]
    Network(String),

    /// Persisted artifact has an incompatible schema version.
    #[error("schema version mismatch: found {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
