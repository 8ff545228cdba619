use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CadaError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("gradient check error: {0}")]
    Check(String),
    #[error("batch construction error: {0}")]
    Batch(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("sharing violation:\n{0}")]
    Sharing(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CadaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CadaError::Io { path: path.into(), source }
    }

    /// Non-finite values and diverging training are numeric failures; everything
    /// else is a problem with the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, CadaError::Numeric(_) | CadaError::Training(_))
    }
}

pub type Result<T, E = CadaError> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::CadaError::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
