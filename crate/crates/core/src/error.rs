use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("angle {theta} is outside the differentiable range [{min}, pi - {min}]")]
    DegenerateAngle { theta: f64, min: f64 },

    #[error("distance {value} is outside the valid range of the {metric} metric")]
    InvalidDistance { metric: &'static str, value: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("insufficient data: need at least {needed} valid values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("argument {value} outside the domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("angle statistics are not initialized")]
    UninitializedStats,

    #[error("{what} {value} is out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
