use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Malformed or unusable input data.
    #[error("data error: {0}")]
    Data(String),
    /// Invalid option or feature-map configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// Matrix factorization broke down at `pivot`.
    #[error("singular matrix at pivot {pivot}")]
    Singular { pivot: usize },
    /// An iterative solver ran out of iterations or stalled.
    #[error("no convergence after {iterations} iterations: {reason}")]
    NonConvergence {
        iterations: usize,
        reason: String,
        last: Vec<f64>,
    },
    /// The Lagrange system for the empirical-likelihood weights has no
    /// interior solution.
    #[error("infeasible Lagrange system: {0}")]
    Feasibility(String),
    /// Label orientation cannot be decided by the requested rule.
    #[error("label orientation tie: {0}")]
    Tie(String),
    /// A matrix required to be of full rank is not.
    #[error("rank deficient: {0}")]
    Rank(String),
}

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the input rather than by numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Data(_) | Error::Config(_) | Error::Domain(_))
    }
}
