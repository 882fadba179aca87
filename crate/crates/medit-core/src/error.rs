use std::fmt;

/// Error kind, used by callers (the CLI) to map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Shape/dimension mismatch between tensors.
    Shape,
    /// Out-of-range or otherwise invalid parameter value.
    Parameter,
    /// NaN/Inf or other numeric-domain failure.
    Numeric,
    /// Token not in the closed vocabulary, or sequence too long.
    Vocab,
    /// API contract violation (e.g. non-scalar loss, empty batch).
    Contract,
    /// Bad configuration (unknown keys, checkpoint-hash mismatch, ...).
    Config,
    /// Corrupt or inconsistent on-disk artifact.
    Integrity,
    /// Invalid scene specification.
    Scene,
    /// Underlying I/O failure.
    Io,
}

#[derive(Debug, thiserror::Error)]
pub struct Error {
    pub kind: ErrorKind,
    pub message: String,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl Error {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Shape, msg)
    }
    pub fn parameter(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Parameter, msg)
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Numeric, msg)
    }
    pub fn vocab(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Vocab, msg)
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Contract, msg)
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, msg)
    }
    pub fn integrity(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Integrity, msg)
    }
    pub fn scene(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Scene, msg)
    }
    pub fn io(msg: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, msg)
    }

    pub fn kind(&self) -> ErrorKind {
        self.kind
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Self::new(ErrorKind::Io, format!("image: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ErrorKind::Config, format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
