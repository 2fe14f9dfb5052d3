use thiserror::Error;

/// Errors raised by simulation, data handling, learning and the oracles.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("trajectory diverged at t = {time:.6}: state norm {norm:.3e} exceeds bound {bound:.1e}")]
    Diverged { time: f64, norm: f64, bound: f64 },

    #[error("closed loop unstable at t = {time:.6}: state norm {norm:.3e} exceeds bound {bound:.1e}")]
    Unstable { time: f64, norm: f64, bound: f64 },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-coercive Q in μ: {0}")]
    NonCoercive(String),

    #[error("unsupported basis: {0}")]
    UnsupportedBasis(String),

    #[error(
        "singular regression system: rank {rank} of {dim} at relative tolerance {tolerance:e}; \
         collect more samples or use richer excitation"
    )]
    Singular { rank: usize, dim: usize, tolerance: f64 },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("Riccati solver: {0}")]
    Riccati(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_iteration(iteration: usize, source: Error) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(source),
        }
    }

    /// True for failures that come from the numbers rather than from the inputs' shape.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Diverged { .. }
            | Error::Unstable { .. }
            | Error::NonCoercive(_)
            | Error::Singular { .. }
            | Error::Riccati(_) => true,
            Error::Sample { source, .. } | Error::AtIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
