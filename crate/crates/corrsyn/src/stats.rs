//! Order-parameter extraction from activity moments (participation-ratio
//! dimensionality, correlation strength, diagonal moments) and the
//! annealed spectral law of the input ensemble.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{sym_eigvals, SymMatrix};
use crate::propagation::ActivityMoments;

/// Scalar diagnostics of one layer.
///
/// `d_tilde` always satisfies `d_tilde = k1^2 / (n_sigma + k2)` and
/// `d = N * d_tilde`; the trace-identity route in `participation_ratio`
/// agrees to roundoff.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LayerSummary {
    pub d: f64,
    pub d_tilde: f64,
    pub k1: f64,
    pub k2: f64,
    pub q: f64,
    pub n_sigma: f64,
}

/// Participation ratio `D = tr(C)^2 / tr(C^2)` and its normalized form,
/// via trace identities — no eigendecomposition.
pub fn participation_ratio(c: &SymMatrix) -> Result<(f64, f64)> {
    let tr = c.trace();
    if tr <= 0.0 {
        return Err(Error::Domain(format!(
            "participation ratio needs positive trace, got {tr}"
        )));
    }
    let tr_sq = c.trace_of_square();
    if tr_sq == 0.0 {
        return Err(Error::Domain("degenerate covariance: tr(C^2) = 0".into()));
    }
    let d = tr * tr / tr_sq;
    Ok((d, d / c.dim() as f64))
}

/// All scalar order parameters of one layer's moments.
pub fn layer_summary(mom: &ActivityMoments) -> Result<LayerSummary> {
    let c = &mom.cov;
    let n = c.dim() as f64;
    let mut k1 = 0.0;
    let mut k2 = 0.0;
    for i in 0..c.dim() {
        let d = c.diag(i);
        k1 += d;
        k2 += d * d;
    }
    k1 /= n;
    k2 /= n;
    let n_sigma = 2.0 / n * c.sum_offdiag_sq();
    let q = mom.mean.iter().map(|m| m * m).sum::<f64>() / n;
    let denom = n_sigma + k2;
    if k1 <= 0.0 || denom <= 0.0 {
        return Err(Error::Domain(format!(
            "degenerate covariance: K1 = {k1}, N*Sigma + K2 = {denom}"
        )));
    }
    let d_tilde = k1 * k1 / denom;
    Ok(LayerSummary {
        d: n * d_tilde,
        d_tilde,
        k1,
        k2,
        q,
        n_sigma,
    })
}

/// Support of the annealed spectral density: `[sigma^2 (sqrt(a)-1)^2,
/// sigma^2 (sqrt(a)+1)^2]` for alpha > 1.
pub fn mp_support(alpha: f64, sigma: f64) -> Result<(f64, f64)> {
    if alpha <= 1.0 {
        return Err(Error::Domain(format!(
            "spectral density implemented for alpha > 1 only (zero-mass atom not modeled), got {alpha}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::Domain("sigma must be positive".into()));
    }
    let s2 = sigma * sigma;
    let lo = s2 * (alpha.sqrt() - 1.0) * (alpha.sqrt() - 1.0);
    let hi = s2 * (alpha.sqrt() + 1.0) * (alpha.sqrt() + 1.0);
    Ok((lo, hi))
}

/// Annealed eigenvalue density of the input covariance,
/// `rho(l) = sqrt((hi - l)(l - lo)) / (2 pi sigma^2 l)` on its support
/// and zero outside.
pub fn mp_density(lambda: f64, alpha: f64, sigma: f64) -> Result<f64> {
    let (lo, hi) = mp_support(alpha, sigma)?;
    if lambda <= lo || lambda >= hi {
        return Ok(0.0);
    }
    let s2 = sigma * sigma;
    Ok(((hi - lambda) * (lambda - lo)).sqrt() / (2.0 * std::f64::consts::PI * s2 * lambda))
}

/// Normalized input dimensionality `alpha / (alpha + 1)`; independent of
/// sigma, valid for all alpha > 0.
pub fn mp_normalized_dim(alpha: f64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::Domain("alpha must be positive".into()));
    }
    Ok(alpha / (alpha + 1.0))
}

/// Histogram of an empirical spectrum against the annealed law.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    /// Eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// `bins + 1` edges over `[0, 1.1 * hi]`.
    pub bin_edges: Vec<f64>,
    /// Empirical density per bin (counts / (n * width)).
    pub densities: Vec<f64>,
    /// Theory density at bin centers.
    pub theory_density: Vec<f64>,
    /// Support of the theory density.
    pub support: (f64, f64),
    /// `sum_b |empirical_b - theory(center_b)| * width`.
    pub l1_distance: f64,
}

/// Eigendecomposes Lambda, histograms the spectrum over
/// `[0, 1.1 * support_hi]`, overlays the annealed density at bin centers,
/// and reports their L1 discrepancy.
pub fn spectrum_report(
    lambda: &SymMatrix,
    alpha: f64,
    sigma: f64,
    bins: usize,
) -> Result<SpectrumReport> {
    if bins == 0 {
        return Err(Error::Domain("need at least one histogram bin".into()));
    }
    let support = mp_support(alpha, sigma)?;
    let eigenvalues = sym_eigvals(lambda)?;
    let n = eigenvalues.len();

    let hi_edge = 1.1 * support.1;
    let width = hi_edge / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|b| b as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for &ev in &eigenvalues {
        if ev < 0.0 || ev >= hi_edge {
            continue;
        }
        let b = ((ev / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let densities: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / (n as f64 * width))
        .collect();
    let theory_density: Vec<f64> = (0..bins)
        .map(|b| mp_density((b as f64 + 0.5) * width, alpha, sigma))
        .collect::<Result<_>>()?;
    let l1_distance = densities
        .iter()
        .zip(&theory_density)
        .map(|(e, t)| (e - t).abs() * width)
        .sum();
    Ok(SpectrumReport {
        eigenvalues,
        bin_edges,
        densities,
        theory_density,
        support,
        l1_distance,
    })
}
