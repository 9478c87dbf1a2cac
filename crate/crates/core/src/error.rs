use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by failure class so the CLI can map them onto
/// its documented exit codes (config = 1, divergence = 2, I/O = 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("pilot column for user {user} is all-zero; its variable-node variance is undefined")]
    ZeroPilotColumn { user: usize },

    #[error("numerical domain error: {0}")]
    Numerical(String),

    #[error("solver diverged at iteration {iter}: residual {residual:.3e} exceeds {limit:.3e} times the initial scale")]
    Divergence {
        iter: usize,
        residual: f64,
        limit: f64,
    },

    #[error("trial {trial} (seed {seed}) failed: {source}")]
    Trial {
        trial: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Exit code the CLI should report for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) => 1,
            Error::Divergence { .. } => 2,
            Error::Io(_) | Error::Serialization(_) => 3,
            Error::ZeroPilotColumn { .. } | Error::Numerical(_) => 1,
            Error::Trial { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
