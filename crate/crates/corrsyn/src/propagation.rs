//! Propagation of activity statistics through a fixed (quenched) network,
//! two independent ways: the mean-field moment iteration (mean vector and
//! full covariance through Gaussian expectations), and brute-force sample
//! propagation. The two routes cross-validate each other.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::ensemble::{LayerParams, NetworkConfig, WeightKind};
use crate::error::{Error, Result};
use crate::numerics::{clamp_psi, QuadratureRule, RandomSource, SymMatrix};

/// Diagonal covariance entries in [-NEG_DIAG_CLAMP, 0) are treated as
/// roundoff and clamped to zero; anything below is corruption.
const NEG_DIAG_CLAMP: f64 = 1e-8;

/// First two moments of one layer's activity.
#[derive(Debug, Clone)]
pub struct ActivityMoments {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
}

impl ActivityMoments {
    /// Zero-mean moments with the given covariance — the standard input
    /// initialization.
    pub fn zero_mean(cov: SymMatrix) -> Self {
        Self {
            mean: DVector::zeros(cov.dim()),
            cov,
        }
    }

    pub fn width(&self) -> usize {
        self.cov.dim()
    }
}

/// Statistics of the pre-activation: its mean `z0 = b + [w m]` (with the
/// g/sqrt(N) prefactor for binary weights) and the mean-subtracted
/// covariance `Delta = w C w^T` (times g^2/N for binary).
#[derive(Debug, Clone)]
pub struct PreActivationStats {
    pub mean: DVector<f64>,
    pub delta: SymMatrix,
}

/// A batch of activation samples at one layer; rows are samples.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub values: DMatrix<f64>,
}

impl SampleBatch {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn count(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

fn weight_prefactors(kind: WeightKind, g: f64, n: usize) -> (f64, f64) {
    // (mean prefactor on w*h, covariance prefactor on w C w^T)
    match kind {
        WeightKind::Binary => (g / (n as f64).sqrt(), g * g / n as f64),
        WeightKind::Continuous => (1.0, 1.0),
    }
}

/// Exact pre-activation statistics for one layer transition.
pub fn preactivation_stats(
    params: &LayerParams,
    prev: &ActivityMoments,
    kind: WeightKind,
    g: f64,
) -> Result<PreActivationStats> {
    let n = params.weights.nrows();
    if params.weights.ncols() != prev.width() || params.biases.len() != n {
        return Err(Error::Dimension(format!(
            "layer {}x{} with bias {} applied to width-{} moments",
            n,
            params.weights.ncols(),
            params.biases.len(),
            prev.width()
        )));
    }
    let (mean_pref, cov_pref) = weight_prefactors(kind, g, n);
    let mut mean = &params.weights * &prev.mean;
    mean *= mean_pref;
    mean += &params.biases;

    let c_full = prev.cov.to_dmatrix();
    let wc = &params.weights * c_full;
    let mut prod = wc * params.weights.transpose();
    prod *= cov_pref;
    let delta = SymMatrix::from_lower(&prod)?;
    Ok(PreActivationStats { mean, delta })
}

/// One mean-field step: pushes (m, C) through a layer by Gaussian
/// expectations of tanh over the pre-activation statistics. Diagonal
/// covariance entries use the psi = 1 reduction of the same bivariate
/// formula.
pub fn moment_step(
    params: &LayerParams,
    prev: &ActivityMoments,
    cfg: &NetworkConfig,
    rule: &QuadratureRule,
) -> Result<ActivityMoments> {
    let pre = preactivation_stats(params, prev, cfg.kind, cfg.gain)?;
    moment_step_from_preactivation(&pre, rule)
}

/// The integration half of `moment_step`, reused by diagnostics that need
/// custom pre-activation statistics.
pub fn moment_step_from_preactivation(
    pre: &PreActivationStats,
    rule: &QuadratureRule,
) -> Result<ActivityMoments> {
    let n = pre.delta.dim();
    let nodes = rule.nodes();
    let weights = rule.weights();
    let k = nodes.len();

    let mut sd = vec![0.0; n];
    for i in 0..n {
        let d = pre.delta.diag(i);
        if d < -NEG_DIAG_CLAMP {
            return Err(Error::Propagation(format!(
                "pre-activation variance Delta[{i}] = {d:e} is negative beyond roundoff"
            )));
        }
        sd[i] = d.max(0.0).sqrt();
    }

    // phi table: F[i*k + a] = tanh(sd_i * x_a + z0_i)
    let mut table = vec![0.0; n * k];
    for i in 0..n {
        let z0 = pre.mean[i];
        for (a, &x) in nodes.iter().enumerate() {
            table[i * k + a] = (sd[i] * x + z0).tanh();
        }
    }

    let mut mean = DVector::<f64>::zeros(n);
    let mut cov = SymMatrix::zeros(n);
    for i in 0..n {
        let row = &table[i * k..(i + 1) * k];
        let mut m = 0.0;
        let mut sq = 0.0;
        for a in 0..k {
            m += weights[a] * row[a];
            sq += weights[a] * row[a] * row[a];
        }
        mean[i] = m;
        cov.set(i, i, sq - m * m);
    }

    // off-diagonal entries: independent bivariate expectations. The
    // outer/inner axis is chosen by (sd, z0) rather than by index, so
    // the finite-rule value is permutation-equivariant.
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let entries: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = if (sd[j], pre.mean[j]) < (sd[i], pre.mean[i]) {
                (j, i)
            } else {
                (i, j)
            };
            pair_covariance(
                &table[a * k..(a + 1) * k],
                sd[a],
                sd[b],
                pre.delta.get(a, b),
                pre.mean[b],
                mean[a],
                mean[b],
                nodes,
                weights,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    for (&(i, j), &v) in pairs.iter().zip(&entries) {
        cov.set(i, j, v);
    }

    Ok(ActivityMoments { mean, cov })
}

#[allow(clippy::too_many_arguments)]
fn pair_covariance(
    phi_i: &[f64],
    sd_i: f64,
    sd_j: f64,
    delta_ij: f64,
    z0_j: f64,
    m_i: f64,
    m_j: f64,
    nodes: &[f64],
    weights: &[f64],
) -> Result<f64> {
    let k = nodes.len();
    if sd_i == 0.0 || sd_j == 0.0 {
        // a degenerate marginal carries no covariance
        return Ok(0.0);
    }
    let psi = clamp_psi(delta_ij / (sd_i * sd_j))?;
    let mut acc = 0.0;
    if psi.abs() == 1.0 {
        for a in 0..k {
            let arg = sd_j * (psi * nodes[a]) + z0_j;
            acc += weights[a] * phi_i[a] * arg.tanh();
        }
    } else {
        let s = (1.0 - psi * psi).sqrt();
        for a in 0..k {
            let base = psi * nodes[a];
            let mut inner = 0.0;
            for b in 0..k {
                let arg = sd_j * (base + s * nodes[b]) + z0_j;
                inner += weights[b] * arg.tanh();
            }
            acc += weights[a] * phi_i[a] * inner;
        }
    }
    Ok(acc - m_i * m_j)
}

/// Runs the mean-field iteration through every layer; input moments are
/// zero mean with the data covariance.
pub fn propagate_moments(
    net: &[LayerParams],
    input: &ActivityMoments,
    cfg: &NetworkConfig,
    rule: &QuadratureRule,
) -> Result<Vec<ActivityMoments>> {
    let mut out = Vec::with_capacity(net.len());
    let mut current = input.clone();
    for params in net {
        current = moment_step(params, &current, cfg, rule)?;
        out.push(current.clone());
    }
    Ok(out)
}

/// Applies one layer to a batch of samples: `tanh(pref * h w^T + b)`.
pub fn forward_batch(
    params: &LayerParams,
    batch: &SampleBatch,
    kind: WeightKind,
    g: f64,
) -> Result<SampleBatch> {
    let n = params.weights.nrows();
    if batch.width() != params.weights.ncols() {
        return Err(Error::Dimension(format!(
            "batch width {} vs layer input {}",
            batch.width(),
            params.weights.ncols()
        )));
    }
    let (pref, _) = weight_prefactors(kind, g, n);
    let mut z = &batch.values * params.weights.transpose();
    for r in 0..z.nrows() {
        for c in 0..n {
            z[(r, c)] = (pref * z[(r, c)] + params.biases[c]).tanh();
        }
    }
    Ok(SampleBatch::new(z))
}

/// Propagates a full sample batch through every layer, returning each
/// layer's activations.
pub fn propagate_samples(
    net: &[LayerParams],
    inputs: &SampleBatch,
    cfg: &NetworkConfig,
) -> Result<Vec<SampleBatch>> {
    let mut out = Vec::with_capacity(net.len());
    let mut current = inputs.clone();
    for params in net {
        current = forward_batch(params, &current, cfg.kind, cfg.gain)?;
        out.push(current.clone());
    }
    Ok(out)
}

/// Unbiased sample mean and covariance (divisor S-1).
pub fn moments_from_samples(batch: &SampleBatch) -> Result<ActivityMoments> {
    let s = batch.count();
    if s < 2 {
        return Err(Error::Domain(format!(
            "covariance estimation needs at least 2 samples, got {s}"
        )));
    }
    let accum = MomentAccumulator::from_batch(batch);
    Ok(accum.finish())
}

/// Streaming accumulator for sample moments: sums and Gram matrix, so
/// batches can be processed in blocks without holding them all.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    count: usize,
    sum: DVector<f64>,
    gram: DMatrix<f64>,
}

impl MomentAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            sum: DVector::zeros(width),
            gram: DMatrix::zeros(width, width),
        }
    }

    pub fn from_batch(batch: &SampleBatch) -> Self {
        let mut acc = Self::new(batch.width());
        acc.add_batch(batch);
        acc
    }

    pub fn add_batch(&mut self, batch: &SampleBatch) {
        let x = &batch.values;
        self.count += x.nrows();
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                self.sum[c] += x[(r, c)];
            }
        }
        self.gram += x.transpose() * x;
    }

    /// Merges another accumulator (used for deterministic parallel
    /// reductions in block order).
    pub fn merge(&mut self, other: &MomentAccumulator) {
        self.count += other.count;
        self.sum += &other.sum;
        self.gram += &other.gram;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> ActivityMoments {
        let s = self.count as f64;
        let mean = &self.sum / s;
        let n = self.sum.len();
        let denom = s - 1.0;
        let cov = SymMatrix::from_fn(n, |i, j| {
            (self.gram[(i, j)] - s * mean[i] * mean[j]) / denom
        });
        ActivityMoments { mean, cov }
    }
}

/// Streams `total` input samples through the network in blocks, returning
/// per-layer moment estimates (index 0 = the inputs themselves) without
/// materializing full batches. Blocks draw from pre-split sources and are
/// propagated in parallel, then reduced in block order, so results are
/// deterministic for a fixed (seed, block size).
pub fn propagate_sample_moments<F>(
    net: &[LayerParams],
    cfg: &NetworkConfig,
    total: usize,
    block: usize,
    rs: &mut RandomSource,
    draw_block: F,
) -> Result<Vec<ActivityMoments>>
where
    F: Fn(usize, &mut RandomSource) -> Result<SampleBatch> + Sync,
{
    if total < 2 {
        return Err(Error::Domain("need at least 2 samples".into()));
    }
    let block = block.max(1);
    let width = net.first().map_or(0, |l| l.weights.ncols());

    let mut sizes = Vec::new();
    let mut remaining = total;
    while remaining > 0 {
        let b = remaining.min(block);
        sizes.push(b);
        remaining -= b;
    }
    let sources: Vec<RandomSource> = sizes.iter().map(|_| rs.split()).collect();

    let depth = net.len();
    let per_block: Vec<Result<Vec<MomentAccumulator>>> = sizes
        .par_iter()
        .zip(sources)
        .map(|(&b, mut src)| {
            let inputs = draw_block_checked(&draw_block, b, &mut src, width)?;
            let mut accs = Vec::with_capacity(depth + 1);
            let mut acc0 = MomentAccumulator::new(inputs.width());
            acc0.add_batch(&inputs);
            accs.push(acc0);
            let mut current = inputs;
            for params in net {
                current = forward_batch(params, &current, cfg.kind, cfg.gain)?;
                let mut a = MomentAccumulator::new(current.width());
                a.add_batch(&current);
                accs.push(a);
            }
            Ok(accs)
        })
        .collect();

    let mut totals: Option<Vec<MomentAccumulator>> = None;
    for res in per_block {
        let accs = res?;
        match &mut totals {
            None => totals = Some(accs),
            Some(t) => {
                for (dst, src) in t.iter_mut().zip(&accs) {
                    dst.merge(src);
                }
            }
        }
    }
    Ok(totals
        .expect("at least one block")
        .iter()
        .map(MomentAccumulator::finish)
        .collect())
}

fn draw_block_checked<F>(
    draw: &F,
    count: usize,
    rs: &mut RandomSource,
    expect_width: usize,
) -> Result<SampleBatch>
where
    F: Fn(usize, &mut RandomSource) -> Result<SampleBatch>,
{
    let batch = draw(count, rs)?;
    if batch.count() != count {
        return Err(Error::Dimension(format!(
            "block sampler returned {} rows, expected {count}",
            batch.count()
        )));
    }
    if expect_width != 0 && batch.width() != expect_width {
        return Err(Error::Dimension(format!(
            "block sampler width {} vs network width {expect_width}",
            batch.width()
        )));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{sample_layer, sample_network, NetworkConfig, WeightKind};
    use crate::numerics::DEFAULT_QUAD_ORDER;
    use approx::assert_abs_diff_eq;

    fn rule() -> QuadratureRule {
        QuadratureRule::gauss_hermite(DEFAULT_QUAD_ORDER).unwrap()
    }

    fn cfg(kind: WeightKind, n: usize, r: f64) -> NetworkConfig {
        NetworkConfig {
            width: n,
            depth: 2,
            gain: 0.9,
            bias_var: 0.1,
            corr_r: r,
            kind,
        }
    }

    fn random_moments(n: usize, rs: &mut RandomSource) -> ActivityMoments {
        // a well-conditioned random covariance: A A^T / n + small ridge
        let a = DMatrix::from_vec(n, n, rs.standard_normals(n * n));
        let g = &a * a.transpose();
        let cov = SymMatrix::from_fn(n, |i, j| {
            g[(i, j)] / n as f64 + if i == j { 0.1 } else { 0.0 }
        });
        let mean = DVector::from_vec(rs.standard_normals(n)) * 0.2;
        ActivityMoments { mean, cov }
    }

    #[test]
    fn preactivation_zero_input() {
        let c = cfg(WeightKind::Continuous, 6, 0.0);
        let mut rs = RandomSource::new(1);
        let mut layer = sample_layer(&c, &mut rs).unwrap();
        layer.biases.fill(0.0);
        let prev = ActivityMoments::zero_mean(SymMatrix::zeros(6));
        let pre = preactivation_stats(&layer, &prev, c.kind, c.gain).unwrap();
        assert!(pre.mean.iter().all(|&v| v == 0.0));
        for i in 0..6 {
            for j in 0..=i {
                assert_eq!(pre.delta.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn preactivation_identity_cov_is_wwt() {
        let c = cfg(WeightKind::Continuous, 5, 0.0);
        let mut rs = RandomSource::new(2);
        let layer = sample_layer(&c, &mut rs).unwrap();
        let prev = ActivityMoments::zero_mean(SymMatrix::identity(5));
        let pre = preactivation_stats(&layer, &prev, c.kind, c.gain).unwrap();
        let wwt = &layer.weights * layer.weights.transpose();
        for i in 0..5 {
            for j in 0..=i {
                assert_abs_diff_eq!(pre.delta.get(i, j), wwt[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn preactivation_matches_triple_loop_oracle() {
        let n = 8;
        for kind in [WeightKind::Binary, WeightKind::Continuous] {
            let c = cfg(kind, n, 0.5);
            let mut rs = RandomSource::new(3);
            let layer = sample_layer(&c, &mut rs).unwrap();
            let prev = random_moments(n, &mut rs);
            let pre = preactivation_stats(&layer, &prev, c.kind, c.gain).unwrap();
            let pref = match kind {
                WeightKind::Binary => c.gain * c.gain / n as f64,
                WeightKind::Continuous => 1.0,
            };
            for i in 0..n {
                for j in 0..=i {
                    let mut acc = 0.0;
                    for k in 0..n {
                        for l in 0..n {
                            acc +=
                                layer.weights[(i, k)] * prev.cov.get(k, l) * layer.weights[(j, l)];
                        }
                    }
                    assert_abs_diff_eq!(pre.delta.get(i, j), pref * acc, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn moment_step_deterministic_preactivation() {
        // Delta = 0 everywhere: m_i = tanh(z0_i), C = 0
        let n = 5;
        let c = cfg(WeightKind::Continuous, n, 0.0);
        let mut rs = RandomSource::new(4);
        let layer = sample_layer(&c, &mut rs).unwrap();
        let prev = ActivityMoments::zero_mean(SymMatrix::zeros(n));
        let out = moment_step(&layer, &prev, &c, &rule()).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(out.mean[i], layer.biases[i].tanh(), epsilon = 1e-14);
            for j in 0..=i {
                assert_abs_diff_eq!(out.cov.get(i, j), 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn moment_step_odd_symmetry() {
        // z0 = 0, Delta = sigma^2 I: mean 0 by odd symmetry, C diagonal
        let n = 4;
        let pre = PreActivationStats {
            mean: DVector::zeros(n),
            delta: {
                let mut d = SymMatrix::zeros(n);
                for i in 0..n {
                    d.set(i, i, 0.49);
                }
                d
            },
        };
        let out = moment_step_from_preactivation(&pre, &rule()).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(out.mean[i], 0.0, epsilon = 1e-14);
            for j in 0..i {
                assert_abs_diff_eq!(out.cov.get(i, j), 0.0, epsilon = 1e-14);
            }
            assert!(out.cov.diag(i) > 0.0 && out.cov.diag(i) <= 1.0);
        }
    }

    #[test]
    fn moment_step_matches_monte_carlo_small_n() {
        // N=8 random instance vs direct Monte Carlo of the bivariate
        // expectations, via Cholesky sampling of the pre-activations
        let n = 8;
        let c = cfg(WeightKind::Continuous, n, 0.5);
        let mut rs = RandomSource::new(5);
        let layer = sample_layer(&c, &mut rs).unwrap();
        let prev = random_moments(n, &mut rs);
        let out = moment_step(&layer, &prev, &c, &rule()).unwrap();

        let pre = preactivation_stats(&layer, &prev, c.kind, c.gain).unwrap();
        let l = crate::ensemble::cholesky_with_jitter_retry(&pre.delta).unwrap();
        let samples = 2_000_000usize;
        let mut sum = vec![0.0; n];
        let mut prod = vec![0.0; n * n];
        let mut prod_sq = vec![0.0; n * n];
        let mut eps = vec![0.0; n];
        let mut h = vec![0.0; n];
        for _ in 0..samples {
            rs.fill_standard_normals(&mut eps);
            for i in 0..n {
                let mut a = 0.0;
                for k in 0..=i {
                    a += l[(i, k)] * eps[k];
                }
                h[i] = (a + pre.mean[i]).tanh();
            }
            for i in 0..n {
                sum[i] += h[i];
                for j in 0..=i {
                    let v = h[i] * h[j];
                    prod[i * n + j] += v;
                    prod_sq[i * n + j] += v * v;
                }
            }
        }
        let s = samples as f64;
        for i in 0..n {
            for j in 0..=i {
                let mean_prod = prod[i * n + j] / s;
                let var = prod_sq[i * n + j] / s - mean_prod * mean_prod;
                let mc_cov = mean_prod - (sum[i] / s) * (sum[j] / s);
                let se = (var / s).sqrt();
                let got = out.cov.get(i, j);
                assert!(
                    (got - mc_cov).abs() <= 5.0 * se.max(1e-9),
                    "C[{i},{j}] quadrature {got} vs MC {mc_cov} (se {se})"
                );
            }
        }
    }

    #[test]
    fn moment_step_keeps_offdiag_small_for_orthogonal_weights() {
        let n = 100;
        let c = cfg(WeightKind::Continuous, n, 0.0);
        let mut rs = RandomSource::new(6);
        let layer = sample_layer(&c, &mut rs).unwrap();
        let prev = ActivityMoments::zero_mean({
            let mut m = SymMatrix::zeros(n);
            for i in 0..n {
                m.set(i, i, 0.5);
            }
            m
        });
        let out = moment_step(&layer, &prev, &c, &rule()).unwrap();
        let mut max_off = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                max_off = max_off.max(out.cov.get(i, j).abs());
            }
        }
        assert!(
            max_off < 10.0 / (n as f64).sqrt(),
            "max off-diagonal {max_off}"
        );
    }

    #[test]
    fn moment_step_rejects_corrupted_variance() {
        // tiny negative diagonals clamp; real corruption errors out
        let mut delta = SymMatrix::zeros(3);
        delta.set(0, 0, -5e-9);
        delta.set(1, 1, 0.2);
        delta.set(2, 2, 0.2);
        let pre = PreActivationStats {
            mean: DVector::zeros(3),
            delta: delta.clone(),
        };
        let out = moment_step_from_preactivation(&pre, &rule()).unwrap();
        assert_eq!(out.cov.diag(0), 0.0);

        let mut bad = delta;
        bad.set(0, 0, -1e-6);
        let pre = PreActivationStats {
            mean: DVector::zeros(3),
            delta: bad,
        };
        assert!(matches!(
            moment_step_from_preactivation(&pre, &rule()),
            Err(Error::Propagation(_))
        ));
    }

    #[test]
    fn moment_step_saturation_bounds() {
        let n = 12;
        let c = cfg(WeightKind::Binary, n, 1.0);
        let mut rs = RandomSource::new(7);
        let layer = sample_layer(&c, &mut rs).unwrap();
        let prev = random_moments(n, &mut rs);
        let out = moment_step(&layer, &prev, &c, &rule()).unwrap();
        for i in 0..n {
            assert!(out.mean[i].abs() < 1.0);
            assert!(out.cov.diag(i) <= 1.0 && out.cov.diag(i) >= -1e-10);
        }
    }

    #[test]
    fn moment_step_permutation_equivariance() {
        let n = 6;
        let c = cfg(WeightKind::Continuous, n, 0.5);
        let mut rs = RandomSource::new(8);
        let layer = sample_layer(&c, &mut rs).unwrap();
        let prev = random_moments(n, &mut rs);
        let out = moment_step(&layer, &prev, &c, &rule()).unwrap();

        // apply the same permutation to both layers
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let pw = DMatrix::from_fn(n, n, |i, j| layer.weights[(perm[i], perm[j])]);
        let pb = DVector::from_fn(n, |i, _| layer.biases[perm[i]]);
        let pprev = ActivityMoments {
            mean: DVector::from_fn(n, |i, _| prev.mean[perm[i]]),
            cov: SymMatrix::from_fn(n, |i, j| prev.cov.get(perm[i], perm[j])),
        };
        let pout = moment_step(
            &LayerParams {
                weights: pw,
                biases: pb,
            },
            &pprev,
            &c,
            &rule(),
        )
        .unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(pout.mean[i], out.mean[perm[i]], epsilon = 1e-12);
            for j in 0..=i {
                assert_abs_diff_eq!(
                    pout.cov.get(i, j),
                    out.cov.get(perm[i], perm[j]),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn propagate_moments_depth_zero_and_determinism() {
        let c = cfg(WeightKind::Binary, 10, 0.5);
        let mut rs = RandomSource::new(9);
        let prev = random_moments(10, &mut rs);
        let out = propagate_moments(&[], &prev, &c, &rule()).unwrap();
        assert!(out.is_empty());

        let net = sample_network(&c, &mut RandomSource::new(10)).unwrap();
        let a = propagate_moments(&net, &prev, &c, &rule()).unwrap();
        let b = propagate_moments(&net, &prev, &c, &rule()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mean, y.mean);
            assert_eq!(x.cov, y.cov);
        }
    }

    #[test]
    fn forward_batch_zero_input_zero_bias() {
        let n = 4;
        let c = cfg(WeightKind::Continuous, n, 0.0);
        let mut layer = sample_layer(&c, &mut RandomSource::new(11)).unwrap();
        layer.biases.fill(0.0);
        let batch = SampleBatch::new(DMatrix::zeros(3, n));
        let out = propagate_samples(&[layer.clone(), layer], &batch, &c).unwrap();
        for l in &out {
            assert!(l.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_batch_matches_hand_rolled_pass() {
        let n = 4;
        for kind in [WeightKind::Binary, WeightKind::Continuous] {
            let c = cfg(kind, n, 0.0);
            let layer = sample_layer(&c, &mut RandomSource::new(12)).unwrap();
            let x = DVector::from_vec(vec![0.3, -0.8, 0.1, 0.5]);
            let batch = SampleBatch::new(DMatrix::from_fn(1, n, |_, j| x[j]));
            let out = forward_batch(&layer, &batch, kind, c.gain).unwrap();
            let pref = match kind {
                WeightKind::Binary => c.gain / (n as f64).sqrt(),
                WeightKind::Continuous => 1.0,
            };
            for i in 0..n {
                let mut z = layer.biases[i];
                for j in 0..n {
                    z += pref * layer.weights[(i, j)] * x[j];
                }
                assert_abs_diff_eq!(out.values[(0, i)], z.tanh(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn moments_from_samples_basics() {
        // constant batch: zero covariance
        let batch = SampleBatch::new(DMatrix::from_element(5, 3, 0.7));
        let m = moments_from_samples(&batch).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(m.mean[i], 0.7, epsilon = 1e-15);
            for j in 0..=i {
                assert_abs_diff_eq!(m.cov.get(i, j), 0.0, epsilon = 1e-12);
            }
        }
        // two samples {+v, -v}: mean 0, unbiased covariance 2 v v^T
        let mut x = DMatrix::zeros(2, 3);
        x[(0, 0)] = 1.0;
        x[(1, 0)] = -1.0;
        let m = moments_from_samples(&SampleBatch::new(x)).unwrap();
        assert_abs_diff_eq!(m.mean[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.cov.get(0, 0), 2.0, epsilon = 1e-12);

        assert!(moments_from_samples(&SampleBatch::new(DMatrix::zeros(1, 3))).is_err());
    }

    #[test]
    fn moments_from_samples_lln() {
        let n = 10;
        let s = 1_000_000usize;
        let mut rs = RandomSource::new(13);
        let batch = SampleBatch::new(DMatrix::from_vec(s, n, rs.standard_normals(s * n)));
        let m = moments_from_samples(&batch).unwrap();
        let se = 1.0 / (s as f64).sqrt();
        for i in 0..n {
            for j in 0..=i {
                let want = if i == j { 1.0 } else { 0.0 };
                let scale_se = if i == j { se * 2f64.sqrt() } else { se };
                assert!(
                    (m.cov.get(i, j) - want).abs() <= 5.0 * scale_se,
                    "C[{i},{j}] = {}",
                    m.cov.get(i, j)
                );
            }
        }
    }

    #[test]
    fn sample_covariance_matches_moment_step_layer_one() {
        // cross-oracle between the two propagation paths at modest size
        let n = 30;
        let c = cfg(WeightKind::Binary, n, 0.5);
        let mut rs = RandomSource::new(14);
        let layer = sample_layer(&c, &mut rs).unwrap();
        let spec = crate::ensemble::InputEnsembleSpec {
            width: n,
            pattern_count: 2 * n,
            pattern_std: 0.5,
        };
        let s = 200_000usize;
        let (inputs, lambda) = crate::ensemble::sample_inputs(&spec, s, &mut rs).unwrap();
        let theory = moment_step(&layer, &ActivityMoments::zero_mean(lambda), &c, &rule()).unwrap();
        let sim = forward_batch(&layer, &SampleBatch::new(inputs), c.kind, c.gain).unwrap();
        let est = moments_from_samples(&sim).unwrap();
        let sf = s as f64;
        for i in 0..n {
            for j in 0..=i {
                let se = ((theory.cov.diag(i) * theory.cov.diag(j)
                    + theory.cov.get(i, j) * theory.cov.get(i, j))
                    / sf)
                    .sqrt();
                let diff = (est.cov.get(i, j) - theory.cov.get(i, j)).abs();
                assert!(
                    diff <= 5.0 * se.max(1e-9),
                    "C[{i},{j}]: sim {} vs theory {} (se {se})",
                    est.cov.get(i, j),
                    theory.cov.get(i, j)
                );
            }
        }
    }

    #[test]
    fn streaming_moments_match_single_batch() {
        let n = 16;
        let c = cfg(WeightKind::Continuous, n, 0.0);
        let net = sample_network(&c, &mut RandomSource::new(15)).unwrap();
        let spec = crate::ensemble::InputEnsembleSpec {
            width: n,
            pattern_count: 32,
            pattern_std: 0.5,
        };
        let total = 5000;

        // single-shot reference with the same per-block draws
        let mut rs = RandomSource::new(16);
        let stream = propagate_sample_moments(&net, &c, total, 1024, &mut rs, |count, src| {
            let (x, _) = crate::ensemble::sample_inputs(&spec, count, src)?;
            Ok(SampleBatch::new(x))
        })
        .unwrap();
        assert_eq!(stream.len(), net.len() + 1);

        // determinism
        let mut rs2 = RandomSource::new(16);
        let stream2 = propagate_sample_moments(&net, &c, total, 1024, &mut rs2, |count, src| {
            let (x, _) = crate::ensemble::sample_inputs(&spec, count, src)?;
            Ok(SampleBatch::new(x))
        })
        .unwrap();
        for (a, b) in stream.iter().zip(&stream2) {
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.cov, b.cov);
        }
    }
}
