//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on inputs or configuration was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// A non-finite value appeared inside a computation.
    #[error("numeric error in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    /// An artifact refers to a parent (model or stats) other than the one supplied.
    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("content hash mismatch: file declares {declared}, body hashes to {computed}")]
    HashMismatch { declared: String, computed: String },

    #[error("unsupported format version {found} (this reader supports {supported})")]
    UnsupportedVersion { found: u64, supported: u64 },

    #[error("artifact kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    /// The document parsed but does not match the artifact schema.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn provenance(msg: impl Into<String>) -> Self {
        Error::Provenance(msg.into())
    }

    /// Process exit code: 1 for I/O, 2 for validation, 3 for provenance/integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 1,
            Error::Validation(_)
            | Error::Numeric { .. }
            | Error::UnsupportedVersion { .. }
            | Error::KindMismatch { .. }
            | Error::Schema(_) => 2,
            Error::Provenance(_) | Error::HashMismatch { .. } => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Schema(e.to_string())
        }
    }
}
