use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A data record broke a schema or invariant rule.
    #[error("{context}: {message}")]
    Invalid { context: String, message: String },

    #[error("no tokens in scope")]
    EmptyScope,

    #[error("probability {0} is outside (0, 1]")]
    ProbabilityDomain(f64),

    #[error("value {0} is not finite")]
    NonFinite(f64),

    #[error("AUROC undefined: {0}")]
    AurocUndefined(&'static str),

    #[error("backend cannot serve uncertainty estimation: {0}")]
    NoLogprobs(String),

    /// Upstream failure. `retryable` is false for 4xx-class rejections.
    #[error("backend error ({backend}): {message}")]
    Backend {
        backend: String,
        message: String,
        retryable: bool,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::Backend {
                retryable: true,
                ..
            }
        )
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend { .. } | Error::NoLogprobs(_))
    }
}
