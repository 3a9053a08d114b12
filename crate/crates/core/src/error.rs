use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {field}: expected {expected}, got {actual}")]
    DimensionMismatch { field: String, expected: usize, actual: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at batch {batch} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(field: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch { field: field.into(), expected, actual }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable short tag for the error family, used as a machine-parsable prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DimensionMismatch { .. } => "dimension",
            Error::UndefinedMetric(_) => "metric",
            Error::NonFiniteLoss { .. } => "numeric",
            Error::Format { .. } | Error::Record { .. } => "format",
            Error::Io { .. } => "io",
        }
    }
}

pub(crate) fn check_dim(field: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dim(field, expected, actual));
    }
    Ok(())
}
