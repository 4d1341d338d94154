use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Structurally incompatible inputs (e.g. mismatched grids).
    #[error("usage error: {0}")]
    Usage(String),

    /// A type invariant would be violated by the requested construction.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Inputs that must be mutually consistent are not (e.g. a claimed
    /// equilibrium that is not a fixed point of the best response).
    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    /// The operation is not defined for this input variant.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Invalid run or solver configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An iterative scheme exhausted its budget without meeting tolerance.
    #[error("did not converge: {0}")]
    NonConverged(String),

    /// A target distribution is outside the attainable set.
    #[error("not attainable: {0}")]
    Unattainable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
