use thiserror::Error;

/// Crate-wide error type.
///
/// Variants split into two broad families so callers (the CLI in
/// particular) can map them to distinct exit codes: data/configuration
/// problems versus numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors rooted in the numeric pipeline rather than in
    /// input data or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. } | Error::NonFinite { .. } | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
