//! Desk-scale numerical engine for deep networks with weakly-correlated
//! synapses: correlated weight-ensemble samplers, mean-field moment
//! propagation, Monte Carlo cross-checks, closed-form large-N recursions,
//! spectral-law tooling, and a regularized Hebbian trainer.
//!
//! - [`numerics`] — quadrature, symmetric linear algebra, seedable RNG
//! - [`ensemble`] — quenched network parameters and the input ensemble
//! - [`propagation`] — moment iteration and sample propagation
//! - [`stats`] — participation ratios, order parameters, spectral laws
//! - [`theory`] — large-N scalar recursions and operating-point analysis
//! - [`hebbian`] — on-line regularized Hebbian training
//! - [`cli`] — reproducible experiment commands over config + seed

pub mod cli;
pub mod ensemble;
pub mod error;
pub mod hebbian;
pub mod numerics;
pub mod propagation;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
