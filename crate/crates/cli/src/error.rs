use neurimg_core::CoreError;
use neurimg_eeg::EegError;
use neurimg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit status: 1 usage, 2 numeric failure, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Usage(format!("json: {e}"))
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Io(e) => e.into(),
            TensorError::Format(m) => CliError::Io(format!("malformed tensor file: {m}")),
            TensorError::Numeric(m) => CliError::Numeric(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numeric(m) => CliError::Numeric(m),
            CoreError::Io(e) => e.into(),
            CoreError::Json(e) => e.into(),
            CoreError::Tensor(e) => e.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<EegError> for CliError {
    fn from(e: EegError) -> Self {
        match e {
            EegError::Io(e) => e.into(),
            EegError::Json(e) => e.into(),
            EegError::Tensor(e) => e.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}
