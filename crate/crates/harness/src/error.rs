use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid or unparsable configuration; maps to exit code 2.
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{0}")]
    Schema(String),

    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: ticketlab_core::Error,
    },

    #[error(transparent)]
    Core(#[from] ticketlab_core::Error),

    #[error("{0}")]
    Other(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        HarnessError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// Re-labels a core validation failure as a configuration error under
/// `field`.
pub(crate) fn invalid(field: &str, e: ticketlab_core::Error) -> HarnessError {
    let msg = match e {
        ticketlab_core::Error::Config(m) => m,
        other => other.to_string(),
    };
    if field.is_empty() {
        HarnessError::Config(msg)
    } else {
        HarnessError::Config(format!("{field}: {msg}"))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Attaches arm/trial context to core failures.
pub(crate) trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, ticketlab_core::Error> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| HarnessError::Run {
            context: what(),
            source,
        })
    }
}
