use std::fmt;
use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug)]
pub enum Error {
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    /// Full and diagonal covariance representations were mixed in one operation.
    ModeMismatch {
        context: &'static str,
    },
    InvalidRate(f64),
    NegativeVariance {
        index: usize,
        value: f64,
    },
    /// Covariance matrix is not symmetric within tolerance.
    Asymmetric {
        row: usize,
        col: usize,
    },
    NonFinite {
        context: String,
    },
    InvalidArgument(String),
    Csv {
        path: PathBuf,
        row: usize,
        column: Option<usize>,
        message: String,
    },
    DatasetShape {
        dataset: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Json(serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                context,
                expected,
                found,
            } => write!(
                f,
                "dimension mismatch in {context}: expected {expected}, found {found}"
            ),
            Error::ModeMismatch { context } => {
                write!(f, "covariance mode mismatch in {context}")
            }
            Error::InvalidRate(p) => write!(f, "dropout rate {p} is outside [0, 1]"),
            Error::NegativeVariance { index, value } => {
                write!(f, "negative variance {value:e} at unit {index}")
            }
            Error::Asymmetric { row, col } => {
                write!(f, "covariance is not symmetric at ({row}, {col})")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::InvalidArgument(msg) => f.write_str(msg),
            Error::Csv {
                path,
                row,
                column,
                message,
            } => match column {
                Some(c) => write!(f, "{}: row {row}, column {c}: {message}", path.display()),
                None => write!(f, "{}: row {row}: {message}", path.display()),
            },
            Error::DatasetShape {
                dataset,
                expected,
                found,
            } => write!(
                f,
                "dataset {dataset}: expected N={} Q={}, found N={} Q={}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Json(e) => write!(f, "json: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
