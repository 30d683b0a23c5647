use std::path::PathBuf;

/// Errors produced by the library and the `taco` binary.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("task id {task} out of range for {num_tasks} tasks")]
    TaskOutOfRange { task: usize, num_tasks: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI and the C API.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::TaskOutOfRange { .. } => "task_out_of_range",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged(_) => "diverged",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Empty(_) => "empty",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        });
    }
    Ok(())
}
