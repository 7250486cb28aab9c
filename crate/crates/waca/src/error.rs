//! Error taxonomy shared by the library and the CLI. Exit codes: 0 success,
//! 1 usage error, 2 data/config error, 3 numerical failure.

#[derive(Debug, thiserror::Error)]
pub enum WacaError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl WacaError {
    pub fn exit_code(&self) -> i32 {
        match self {
            WacaError::Usage(_) => 1,
            WacaError::Io(_)
            | WacaError::Format(_)
            | WacaError::Config(_)
            | WacaError::Data(_) => 2,
            WacaError::Numerical(_) => 3,
        }
    }
}
