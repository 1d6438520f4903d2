use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error on {axis}: expected {expected}, got {got}")]
    Dimension { axis: String, expected: usize, got: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("freeze error: {0}")]
    Freeze(String),

    #[error("compile error: {0}")]
    Compile(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("dimension overflow: {0}")]
    DimOverflow(String),

    #[error("payload length error: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("header/payload dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("checksum mismatch for array {0}")]
    Checksum(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("equivalence check failed: max abs diff {diff:e} exceeds {tol:e}")]
    Equivalence { diff: f64, tol: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            axis: axis.into(),
            expected,
            got,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Shape(_) => "shape",
            Error::Range(_) => "range",
            Error::Freeze(_) => "freeze",
            Error::Compile(_) => "compile",
            Error::Graph(_) => "graph",
            Error::Config(_) => "config",
            Error::BadMagic(_) => "bad_magic",
            Error::DimOverflow(_) => "dim_overflow",
            Error::Truncated { .. } => "truncated",
            Error::DimMismatch(_) => "dim_mismatch",
            Error::Checksum(_) => "checksum",
            Error::NanLoss { .. } => "nan_loss",
            Error::Empty(_) => "empty",
            Error::Equivalence { .. } => "equivalence",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
