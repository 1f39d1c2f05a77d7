use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs are structurally inconsistent (lengths, ordering, missing data).
    #[error("usage error: {0}")]
    Usage(String),

    /// A factorization or solve failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every incremental weight vanished while tempering.
    #[error("degenerate ensemble at temperature index {temperature}: all incremental weights are zero")]
    DegenerateEnsemble { temperature: usize },

    /// The Monte Carlo sample is too small to resolve the requested tail.
    #[error("insufficient samples for target alpha {alpha}: {detail}; increase n_mc to at least {suggested_n_mc}")]
    InsufficientSamples {
        alpha: f64,
        suggested_n_mc: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
