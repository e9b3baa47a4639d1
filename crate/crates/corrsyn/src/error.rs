use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Cholesky pivot failure: the (jittered) matrix is not positive definite.
    #[error("matrix not positive definite: pivot {index} = {value:.6e} after jitter {jitter:.6e}")]
    NotPositiveDefinite {
        index: usize,
        value: f64,
        jitter: f64,
    },

    /// An integrand evaluated to NaN or infinity at a quadrature node.
    #[error("integrand not finite at node {node}")]
    NonFiniteIntegrand { node: f64 },

    /// Eigen/iterative solver failed to converge.
    #[error("numerical solver failed: {0}")]
    Numerical(String),

    /// Propagated covariance left the admissible region.
    #[error("propagation error: {0}")]
    Propagation(String),

    /// The q-scaling self-consistency bound is violated.
    #[error("scaling violation: {0}")]
    Scaling(String),

    /// Hebbian training failure.
    #[error("training error: {0}")]
    Training(String),

    /// Bad experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
