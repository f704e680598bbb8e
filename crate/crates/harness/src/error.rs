use std::path::Path;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical divergence at step {0}")]
    Divergence(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} self-check(s) failed")]
    SelfTest(usize),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Core(kvgate_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl From<kvgate_core::Error> for HarnessError {
    fn from(e: kvgate_core::Error) -> Self {
        match e {
            kvgate_core::Error::Divergence(step) => HarnessError::Divergence(step),
            other => HarnessError::Core(other),
        }
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    exit_code: i32,
    message: String,
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Divergence(_) => "divergence",
            HarnessError::SelfTest(_) => "selftest",
            HarnessError::Io { .. } => "io",
            HarnessError::Format(_) => "format",
            HarnessError::Core(_) => "validation",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Core(_) => 2,
            HarnessError::Divergence(_) | HarnessError::SelfTest(_) => 3,
            HarnessError::Io { .. } | HarnessError::Format(_) => 4,
        }
    }

    /// One-line JSON description for stderr.
    pub fn record(&self) -> String {
        serde_json::to_string(&ErrorRecord {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("error record serializes")
    }
}
