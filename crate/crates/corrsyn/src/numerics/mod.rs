//! Deterministic numerical kernels shared by every other module:
//! Gauss–Hermite quadrature against the standard normal measure,
//! correlated-Gaussian expectations, symmetric-matrix storage with
//! Cholesky and eigenvalue routines, and a seedable, splittable
//! random source.

mod linalg;
mod quadrature;
mod random;

pub use linalg::{cholesky, sym_eigvals, SymMatrix};
pub use quadrature::{clamp_psi, gauss_expect_1d, gauss_expect_2d, QuadratureRule};
pub use random::RandomSource;

/// Default quadrature order used throughout the crate. tanh-moment
/// integrands are entire, so 40 nodes converge superexponentially and
/// leave the quadrature error far below sampling noise at desk scale.
pub const DEFAULT_QUAD_ORDER: usize = 40;
