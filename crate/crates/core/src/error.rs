use thiserror::Error;

/// Errors produced by the conversion pipeline and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("index {index} out of range for {op} (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("duplicate index {index} in {op}")]
    DuplicateIndex { op: &'static str, index: usize },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("zero-norm {axis} {index} cannot be normalized")]
    ZeroNorm { axis: &'static str, index: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("cost matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("brute-force assignment limited to n <= {max}, got {n}")]
    TooLarge { n: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{0}")]
    Mode(String),

    #[error(transparent)]
    Format(#[from] crate::io::FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::DuplicateIndex { .. } => "duplicate_index",
            Error::Empty(_) => "empty",
            Error::ZeroNorm { .. } => "zero_norm",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NotSquare { .. } => "not_square",
            Error::TooLarge { .. } => "too_large",
            Error::NonFinite(_) => "non_finite",
            Error::Mode(_) => "invalid_mode",
            Error::Format(e) => e.kind(),
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
