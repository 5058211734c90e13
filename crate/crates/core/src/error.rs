use thiserror::Error;

/// Problems with configuration documents, task/controller keys and files.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown task key `{0}`")]
    UnknownTask(String),
    #[error("unknown controller key `{0}`")]
    UnknownController(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e.to_string())
    }
}
