use thiserror::Error;

/// Errors produced by the library.
///
/// Variants are split so callers (the CLI in particular) can tell a violated
/// invariant apart from a filesystem or parse problem.
#[derive(Debug, Error)]
pub enum Error {
    /// A camera, transform or configuration failed validation.
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    /// An argument violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Tensor or vector dimensions disagree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Epipolar geometry is undefined for the given camera pair.
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    /// A non-finite value reached a kernel.
    #[error("non-finite input: {0}")]
    NonFinite(String),
    /// Malformed file content (tensor header, scene JSON, CSV).
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for filesystem failures, false for validation failures.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
