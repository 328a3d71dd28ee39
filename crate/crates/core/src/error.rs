use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid scheme parameters, malformed spec strings, inconsistent configs.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value appeared during evaluation.
    #[error("numeric error at step {step}: {message}")]
    Numeric { step: usize, message: String },

    /// Mismatched shapes between parameters, inputs, or adjoints.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for the CLI: 1 numeric, 2 usage/config, 3 reserved
    /// for verification failures (mapped by the caller).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 1,
            Error::Config(_) | Error::Domain(_) | Error::Contract(_) => 2,
            Error::Io(_) | Error::Serde(_) => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
