use std::path::PathBuf;

use thiserror::Error;

use crate::weights::Role;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed container header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("missing tensor for role {role} (layer {layer:?}): `{key}`")]
    MissingTensor {
        role: Role,
        layer: Option<usize>,
        key: String,
    },
    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value in `{0}`")]
    NonFiniteValue(String),
    #[error("byte length {len} is not a multiple of dtype width {width}")]
    LengthMismatch { len: usize, width: usize },
    #[error("index {index} out of range for {bound} rows")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("{0} did not converge")]
    ConvergenceFailure(&'static str),
    #[error("row count mismatch: {0} vs {1}")]
    RowCountMismatch(usize, usize),
    #[error("matrix is not square ({0}x{1})")]
    NonSquare(usize, usize),
    #[error("invalid dimension {0}")]
    InvalidDim(usize),
    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("only {found} common tokens, at least {required} required")]
    InsufficientOverlap { found: usize, required: usize },
    #[error("transform is not orthogonal (residual {0:.3e})")]
    NotOrthogonal(f64),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
