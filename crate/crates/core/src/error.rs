use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported audio format: {0}")]
    Format(String),

    #[error("sample rate {found} Hz not supported (expected {expected} Hz)")]
    SampleRate { found: u32, expected: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("eigendecomposition did not converge after {0} sweeps")]
    Convergence(usize),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("invalid scene specification: {0}")]
    Spec(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("subspace error: {0}")]
    Subspace(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
