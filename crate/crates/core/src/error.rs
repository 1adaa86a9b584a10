use std::path::PathBuf;

/// Errors surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("search space too large: {options} candidate schedules exceed the budget of {budget}")]
    TooLarge { options: u128, budget: u128 },

    #[error(
        "subproblem solver did not converge after {iterations} iterations \
         (max constraint violation {max_violation:.3e}, projected gradient norm {grad_norm:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        max_violation: f64,
        grad_norm: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
