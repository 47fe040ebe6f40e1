use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, FasError>;

/// Errors emitted by tensor math, training, data generation and persistence.
#[derive(Debug, Clone, PartialEq)]
pub enum FasError {
    /// Operands or arguments with incompatible shapes. `detail` names both shapes.
    Dim { op: &'static str, detail: String },
    /// A documented precondition was violated by the caller.
    Contract(String),
    /// Non-finite values where finite ones are required.
    Numeric(String),
    /// Filesystem failure while reading or writing artifacts.
    Io(String),
    /// Persisted artifact is structurally inconsistent (length/offset checks).
    Integrity(String),
    /// Unsupported artifact format version.
    Version { found: u32, supported: u32 },
    /// Configuration parse failure (unknown key, type mismatch, bad JSON).
    Config(String),
}

impl fmt::Display for FasError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dim { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Self::Io(msg) => write!(f, "i/o error: {msg}"),
            Self::Integrity(msg) => write!(f, "integrity error: {msg}"),
            Self::Version { found, supported } => {
                write!(
                    f,
                    "unsupported format version {found} (supported: {supported})"
                )
            }
            Self::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for FasError {}

impl From<std::io::Error> for FasError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
