use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid manipulator parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("failed to parse {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },

    #[error("inertia matrix is numerically singular at q = [{q1}, {q2}]")]
    SingularInertia { q1: f64, q2: f64 },

    #[error("lyapunov solve failed: {0}")]
    Lyapunov(String),

    #[error("uncertainty bound alpha = {alpha} is not below 1; the nominal model is too far from the plant")]
    AlphaTooLarge { alpha: f64 },

    #[error("simulation state became non-finite at t = {t}")]
    NonFinite { t: f64 },

    #[error("model evaluation failed: {0}")]
    Model(String),

    #[error("kernel matrix not positive definite after jitter escalation (last jitter {jitter:e})")]
    KernelNotPd { jitter: f64 },

    #[error("malformed data in {what}: {reason}")]
    Data { what: String, reason: String },

    #[error("acceptance check failed: {0}")]
    Regression(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numerical failures, 4 for acceptance regressions, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParams(_) | Error::InvalidConfig { .. } | Error::ConfigParse { .. } => 2,
            Error::SingularInertia { .. }
            | Error::Lyapunov(_)
            | Error::AlphaTooLarge { .. }
            | Error::NonFinite { .. }
            | Error::Model(_)
            | Error::KernelNotPd { .. } => 3,
            Error::Regression(_) => 4,
            Error::Data { .. } | Error::Io { .. } | Error::Csv(_) => 1,
        }
    }
}
