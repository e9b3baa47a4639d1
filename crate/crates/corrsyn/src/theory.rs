//! Closed-form large-N recursions for the scalar order parameters of one
//! layer (K1, K2, Q, N*Sigma) and the derived dimensionality, for binary
//! and continuous weight kinds, plus the operating-point and gamma-ratio
//! analyses and the small-Delta expansion diagnostic.
//!
//! All Gaussian channels collapse onto an effective disorder variable
//! `zeta ~ N(0, sigma_b + g^2 Q)` and a thermal variable of variance
//! `g^2 K1`. Per zeta the inner thermal averages
//!
//!   A1 = <phi>, A2 = <phi^2>, T = <phi'>
//!
//! drive everything: Q' = <A1^2>, the exact variance map V = A2 - A1^2
//! gives K1' = <V> and K2' = <V^2>, and the derivative moments
//! (<T^2>, <T^4>, <T1^2 T2^2>) give the correlation-strength factor and
//! the gamma ratios. The cross moment pairs zeta's through the shared
//! mean channel with correlation rho * g^2 Q / (g^2 Q + sigma_b).

use serde::{Deserialize, Serialize};

use crate::ensemble::{LayerParams, NetworkConfig, WeightKind};
use crate::error::{Error, Result};
use crate::numerics::{QuadratureRule, SymMatrix};
use crate::propagation::{moment_step, preactivation_stats, ActivityMoments};

/// Scalar order parameters of one layer in the large-N recursion.
///
/// `gamma1`, `gamma2`, `kappa` describe the transition that produced this
/// state (the input state carries the neutral values 1, 1, 0).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TheoryState {
    pub layer: usize,
    /// Mean diagonal covariance (1/N) sum C_ii.
    pub k1: f64,
    /// Mean squared diagonal (1/N) sum C_ii^2.
    pub k2: f64,
    /// Mean squared activity (1/N) sum m_i^2.
    pub q: f64,
    /// Correlation strength N*Sigma = (2/N) sum_{i<j} C_ij^2.
    pub n_sigma: f64,
    /// Normalized dimensionality K1^2 / (N*Sigma + K2).
    pub d_tilde: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Disorder-averaged squared cross derivative moment used by the step.
    pub kappa: f64,
}

impl TheoryState {
    /// Input-layer state, read directly off a sampled covariance: zero
    /// mean data gives Q = 0, and the finite-size entries of Lambda give
    /// K1, K2 and N*Sigma.
    pub fn from_input_covariance(lambda: &SymMatrix) -> Result<Self> {
        let n = lambda.dim() as f64;
        let mut k1 = 0.0;
        let mut k2 = 0.0;
        for i in 0..lambda.dim() {
            let d = lambda.diag(i);
            k1 += d;
            k2 += d * d;
        }
        k1 /= n;
        k2 /= n;
        let n_sigma = 2.0 / n * lambda.sum_offdiag_sq();
        if k1 <= 0.0 || n_sigma + k2 <= 0.0 {
            return Err(Error::Domain("degenerate input covariance".into()));
        }
        Ok(Self {
            layer: 0,
            k1,
            k2,
            q: 0.0,
            n_sigma,
            d_tilde: k1 * k1 / (n_sigma + k2),
            gamma1: 1.0,
            gamma2: 1.0,
            kappa: 0.0,
        })
    }
}

/// Parameters of the large-N recursion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub width: usize,
    pub gain: f64,
    pub bias_var: f64,
    pub corr_r: f64,
    pub kind: WeightKind,
    /// Use the small-g linearized K1/K2 recursions instead of the exact
    /// variance-map forms.
    pub small_g_mode: bool,
    /// In small-g mode, use the plain fourth-moment forms of the
    /// derivative moments instead of the thermal-inclusive ones.
    pub plain_fourth_moment: bool,
}

impl TheoryConfig {
    pub fn from_network(cfg: &NetworkConfig) -> Self {
        Self {
            width: cfg.width,
            gain: cfg.gain,
            bias_var: cfg.bias_var,
            corr_r: cfg.corr_r,
            kind: cfg.kind,
            small_g_mode: false,
            plain_fourth_moment: false,
        }
    }

    fn network(&self) -> NetworkConfig {
        NetworkConfig {
            width: self.width,
            depth: 0,
            gain: self.gain,
            bias_var: self.bias_var,
            corr_r: self.corr_r,
            kind: self.kind,
        }
    }

    /// Pre-activation correlation coefficient between two neurons sharing
    /// no synapses: q for binary weights, q N / g^2 for continuous.
    pub fn rho(&self) -> f64 {
        let q = self.network().q();
        match self.kind {
            WeightKind::Binary => q,
            WeightKind::Continuous => q * self.width as f64 / (self.gain * self.gain),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        if self.rho() > 1.0 {
            return Err(Error::Scaling(format!(
                "pre-activation correlation rho = {} exceeds 1; the continuous scaling needs r <= g^2 sqrt(N)",
                self.rho()
            )));
        }
        Ok(())
    }
}

/// Disorder-averaged derivative moments entering the gamma ratios.
#[derive(Debug, Clone, Copy)]
pub struct KbarMoments {
    /// Mean linear coefficient of the diagonal expansion.
    pub kbar_ii: f64,
    /// Its second moment.
    pub kbar_ii_sq: f64,
    /// Cross moment with the shared-channel correlation; the kappa of the
    /// correlation-strength recursion.
    pub kbar_ij_sq: f64,
}

/// Inner thermal averages on the effective-disorder quadrature grid.
struct InnerTables {
    /// zeta value per outer node.
    zeta: Vec<f64>,
    /// <phi(thermal z + zeta)> per outer node.
    a1: Vec<f64>,
    /// <phi^2(thermal z + zeta)>.
    a2: Vec<f64>,
    /// <phi'(thermal z + zeta)>.
    t: Vec<f64>,
}

fn build_inner_tables(thermal: f64, s_eff: f64, rule: &QuadratureRule) -> InnerTables {
    let nodes = rule.nodes();
    let weights = rule.weights();
    let k = nodes.len();
    let mut zeta = vec![0.0; k];
    let mut a1 = vec![0.0; k];
    let mut a2 = vec![0.0; k];
    let mut t = vec![0.0; k];
    for a in 0..k {
        let z = s_eff * nodes[a];
        zeta[a] = z;
        let (mut s1, mut s2, mut st) = (0.0, 0.0, 0.0);
        for b in 0..k {
            let phi = (thermal * nodes[b] + z).tanh();
            s1 += weights[b] * phi;
            s2 += weights[b] * phi * phi;
            st += weights[b] * (1.0 - phi * phi);
        }
        a1[a] = s1;
        a2[a] = s2;
        t[a] = st;
    }
    InnerTables { zeta, a1, a2, t }
}

/// <phi'(thermal z + zeta)> at an arbitrary zeta.
fn thermal_t(thermal: f64, zeta: f64, rule: &QuadratureRule) -> f64 {
    let mut acc = 0.0;
    for (&z, &w) in rule.nodes().iter().zip(rule.weights()) {
        let phi = (thermal * z + zeta).tanh();
        acc += w * (1.0 - phi * phi);
    }
    acc
}

/// Cross derivative moment <T(zeta1)^2 T(zeta2)^2> where the zetas are
/// jointly Gaussian with variance s_eff^2 each and correlation psi_zeta.
fn cross_moment(
    tables: &InnerTables,
    thermal: f64,
    s_eff: f64,
    psi_zeta: f64,
    rule: &QuadratureRule,
) -> f64 {
    let weights = rule.weights();
    let k = weights.len();
    if psi_zeta == 0.0 || s_eff == 0.0 {
        let mean_t_sq: f64 = (0..k).map(|a| weights[a] * tables.t[a] * tables.t[a]).sum();
        return mean_t_sq * mean_t_sq;
    }
    let s = (1.0 - psi_zeta * psi_zeta).max(0.0).sqrt();
    let nodes = rule.nodes();
    let mut acc = 0.0;
    for a in 0..k {
        let t1_sq = tables.t[a] * tables.t[a];
        let base = psi_zeta * nodes[a];
        let mut inner = 0.0;
        for b in 0..k {
            let zeta2 = s_eff * (base + s * nodes[b]);
            let t2 = thermal_t(thermal, zeta2, rule);
            inner += weights[b] * t2 * t2;
        }
        acc += weights[a] * t1_sq * inner;
    }
    acc
}

/// The three derivative moments at the given layer statistics.
///
/// The thermal-inclusive forms (default) use `T = <phi'(thermal z + zeta)>`
/// consistently for all three moments, which keeps the Cauchy–Schwarz
/// ordering of the gamma ratios exact; the plain forms drop the thermal
/// channel from the diagonal moments.
pub fn k_coefficients(
    state: &TheoryState,
    cfg: &TheoryConfig,
    rule: &QuadratureRule,
) -> Result<KbarMoments> {
    cfg.validate()?;
    if !state.k1.is_finite() || state.k1 < 0.0 || state.q < 0.0 {
        return Err(Error::Domain(format!(
            "invalid layer statistics: K1 = {}, Q = {}",
            state.k1, state.q
        )));
    }
    let g2 = cfg.gain * cfg.gain;
    let thermal = (g2 * state.k1).sqrt();
    let s_eff_sq = cfg.bias_var + g2 * state.q;
    let s_eff = s_eff_sq.sqrt();
    let tables = build_inner_tables(thermal, s_eff, rule);
    let weights = rule.weights();
    let k = weights.len();

    let (kbar_ii, kbar_ii_sq) = if cfg.plain_fourth_moment {
        let mut m2 = 0.0;
        let mut m4 = 0.0;
        for a in 0..k {
            let phi = tables.zeta[a].tanh();
            let dp = 1.0 - phi * phi;
            m2 += weights[a] * dp * dp;
            m4 += weights[a] * dp * dp * dp * dp;
        }
        (m2, m4)
    } else {
        let mut m2 = 0.0;
        let mut m4 = 0.0;
        for a in 0..k {
            let t2 = tables.t[a] * tables.t[a];
            m2 += weights[a] * t2;
            m4 += weights[a] * t2 * t2;
        }
        (m2, m4)
    };

    let psi_zeta = if s_eff_sq > 0.0 {
        cfg.rho() * g2 * state.q / s_eff_sq
    } else {
        0.0
    };
    let kbar_ij_sq = cross_moment(&tables, thermal, s_eff, psi_zeta, rule);
    Ok(KbarMoments {
        kbar_ii,
        kbar_ii_sq,
        kbar_ij_sq,
    })
}

/// Large-N affine map from N*Sigma to the next layer's N*Sigma at frozen
/// (K1, K2, kappa): slope g^4 kappa for both kinds, intercept raised by
/// the correlation term.
pub fn sigma_step(state: &TheoryState, cfg: &TheoryConfig, kappa: f64) -> f64 {
    let g4 = cfg.gain.powi(4);
    let r_sq = cfg.corr_r * cfg.corr_r;
    let k1_sq = state.k1 * state.k1;
    match cfg.kind {
        WeightKind::Binary => g4 * kappa * (state.n_sigma + state.k2 + r_sq * k1_sq),
        WeightKind::Continuous => kappa * (g4 * (state.n_sigma + state.k2) + r_sq * k1_sq),
    }
}

/// Finite-N affine map keeping the (1 ± q^2) factors the large-N form
/// drops; the difference is O(r^2/N) at the scaling q-values.
pub fn sigma_step_finite_n(state: &TheoryState, cfg: &TheoryConfig, kappa: f64) -> f64 {
    let g4 = cfg.gain.powi(4);
    let n = cfg.width as f64;
    let q = cfg.network().q();
    let q_sq = q * q;
    let k1_sq = state.k1 * state.k1;
    match cfg.kind {
        WeightKind::Binary => {
            g4 * kappa * ((1.0 + q_sq) * state.n_sigma + (1.0 - q_sq) * state.k2 + q_sq * n * k1_sq)
        }
        WeightKind::Continuous => {
            let slope = g4 + n * n * q_sq;
            kappa * (slope * (state.n_sigma + state.k2) + q_sq * n * n * n * k1_sq)
        }
    }
}

/// Fixed point of the large-N sigma map at frozen (K1, K2, kappa).
pub fn operating_point(state: &TheoryState, cfg: &TheoryConfig, kappa: f64) -> Result<f64> {
    let g4 = cfg.gain.powi(4);
    let upsilon = g4 * kappa;
    if upsilon >= 1.0 {
        return Err(Error::Numerical(format!(
            "no finite operating point: Upsilon = g^4 kappa = {upsilon} >= 1"
        )));
    }
    let r_sq = cfg.corr_r * cfg.corr_r;
    let k1_sq = state.k1 * state.k1;
    let intercept = match cfg.kind {
        WeightKind::Binary => upsilon * (state.k2 + r_sq * k1_sq),
        WeightKind::Continuous => upsilon * state.k2 + kappa * r_sq * k1_sq,
    };
    Ok(intercept / (1.0 - upsilon))
}

/// Output dimensionality from the previous layer's statistics and the
/// step's gamma ratios — the direct-formula route.
pub fn dimensionality_formula(
    prev: &TheoryState,
    gamma1: f64,
    gamma2: f64,
    cfg: &TheoryConfig,
) -> f64 {
    let r_sq = cfg.corr_r * cfg.corr_r;
    let additive_coeff = match cfg.kind {
        WeightKind::Binary => gamma1 * r_sq + gamma2,
        WeightKind::Continuous => gamma1 * r_sq / cfg.gain.powi(4) + gamma2,
    };
    let k1_sq = prev.k1 * prev.k1;
    k1_sq / (gamma1 * (prev.n_sigma + prev.k2) + additive_coeff * k1_sq)
}

/// The additive denominator term of the dimensionality map for the step
/// that produced `state` (previous layer's K1 required).
pub fn additive_term(state: &TheoryState, prev_k1: f64, cfg: &TheoryConfig) -> f64 {
    let r_sq = cfg.corr_r * cfg.corr_r;
    let coeff = match cfg.kind {
        WeightKind::Binary => state.gamma1 * r_sq + state.gamma2,
        WeightKind::Continuous => state.gamma1 * r_sq / cfg.gain.powi(4) + state.gamma2,
    };
    coeff * prev_k1 * prev_k1
}

/// One step of the large-N recursion.
///
/// In exact mode (default) K1/K2/Q advance through the exact variance-map
/// integrals and the gamma ratios are the effective ones implied by those
/// recursions; in small-g mode all three derivative moments come from
/// `k_coefficients` and the linearized K1/K2 maps are used. Either way
/// the direct dimensionality formula and the identity route agree to
/// roundoff.
pub fn theory_step(
    state: &TheoryState,
    cfg: &TheoryConfig,
    rule: &QuadratureRule,
) -> Result<TheoryState> {
    cfg.validate()?;
    if cfg.gain == 0.0 {
        return Err(Error::Domain(
            "degenerate gain g = 0: K1 collapses and the dimensionality is undefined".into(),
        ));
    }
    if state.k1 <= 0.0 {
        return Err(Error::Domain(format!(
            "layer statistics degenerate: K1 = {}",
            state.k1
        )));
    }
    let g2 = cfg.gain * cfg.gain;
    let g4 = g2 * g2;
    let k1_sq = state.k1 * state.k1;

    let moments = k_coefficients(state, cfg, rule)?;
    let kappa = moments.kbar_ij_sq;

    let thermal = (g2 * state.k1).sqrt();
    let s_eff = (cfg.bias_var + g2 * state.q).sqrt();
    let tables = build_inner_tables(thermal, s_eff, rule);
    let weights = rule.weights();
    let k = weights.len();

    let mut q_next = 0.0;
    let mut v_mean = 0.0;
    let mut v_sq_mean = 0.0;
    for a in 0..k {
        let v = tables.a2[a] - tables.a1[a] * tables.a1[a];
        q_next += weights[a] * tables.a1[a] * tables.a1[a];
        v_mean += weights[a] * v;
        v_sq_mean += weights[a] * v * v;
    }

    let (k1_next, k2_next, gamma1, gamma2) = if cfg.small_g_mode {
        let k1_next = g2 * moments.kbar_ii * state.k1;
        let k2_next = g4 * moments.kbar_ii_sq * k1_sq;
        let denom = moments.kbar_ii * moments.kbar_ii;
        (k1_next, k2_next, kappa / denom, moments.kbar_ii_sq / denom)
    } else {
        let k1_next = v_mean;
        let k2_next = v_sq_mean;
        // effective ratios implied by the exact recursions
        let kbar_ii_eff_sq = k1_next * k1_next / (g4 * k1_sq);
        let kbar_ii_sq_eff = k2_next / (g4 * k1_sq);
        (
            k1_next,
            k2_next,
            kappa / kbar_ii_eff_sq,
            kbar_ii_sq_eff / kbar_ii_eff_sq,
        )
    };

    let n_sigma_next = sigma_step(state, cfg, kappa);
    let d_tilde_next = k1_next * k1_next / (n_sigma_next + k2_next);
    Ok(TheoryState {
        layer: state.layer + 1,
        k1: k1_next,
        k2: k2_next,
        q: q_next,
        n_sigma: n_sigma_next,
        d_tilde: d_tilde_next,
        gamma1,
        gamma2,
        kappa,
    })
}

/// Iterates `theory_step` for `depth` layers; element 0 is the input state.
pub fn run_theory(
    cfg: &TheoryConfig,
    init: &TheoryState,
    depth: usize,
    rule: &QuadratureRule,
) -> Result<Vec<TheoryState>> {
    let mut out = Vec::with_capacity(depth + 1);
    out.push(*init);
    let mut current = *init;
    for _ in 0..depth {
        current = theory_step(&current, cfg, rule)?;
        out.push(current);
    }
    Ok(out)
}

/// Comparison of the exact covariance step against its leading-order
/// linearization `C_ij ~ K_ij Delta_ij` on one quenched layer. Errors are
/// measured relative to the RMS of the exact off-diagonal entries, which
/// avoids blow-up on near-zero individual entries.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExpansionReport {
    pub max_rel: f64,
    pub mean_rel: f64,
    pub rms_exact: f64,
    pub pairs: usize,
}

pub fn expansion_check(
    params: &LayerParams,
    prev: &ActivityMoments,
    cfg: &NetworkConfig,
    rule: &QuadratureRule,
) -> Result<ExpansionReport> {
    let exact = moment_step(params, prev, cfg, rule)?;
    let pre = preactivation_stats(params, prev, cfg.kind, cfg.gain)?;
    let n = pre.delta.dim();

    // per-neuron derivative factor <phi'(sqrt(Delta_ii) x + z0_i)>
    let mut factor = vec![0.0; n];
    for i in 0..n {
        let sd = pre.delta.diag(i).max(0.0).sqrt();
        let z0 = pre.mean[i];
        let mut acc = 0.0;
        for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
            let phi = (sd * x + z0).tanh();
            acc += w * (1.0 - phi * phi);
        }
        factor[i] = acc;
    }

    let mut sq_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..i {
            let e = exact.cov.get(i, j);
            sq_sum += e * e;
            pairs += 1;
        }
    }
    if pairs == 0 || sq_sum == 0.0 {
        return Ok(ExpansionReport {
            max_rel: 0.0,
            mean_rel: 0.0,
            rms_exact: 0.0,
            pairs,
        });
    }
    let rms = (sq_sum / pairs as f64).sqrt();
    let mut max_rel = 0.0f64;
    let mut err_sum = 0.0;
    for i in 0..n {
        for j in 0..i {
            let lin = factor[i] * factor[j] * pre.delta.get(i, j);
            let rel = (lin - exact.cov.get(i, j)).abs() / rms;
            max_rel = max_rel.max(rel);
            err_sum += rel;
        }
    }
    Ok(ExpansionReport {
        max_rel,
        mean_rel: err_sum / pairs as f64,
        rms_exact: rms,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{InputEnsembleSpec, InputSampler};
    use crate::numerics::{RandomSource, DEFAULT_QUAD_ORDER};
    use approx::assert_abs_diff_eq;
    use rand_distr::Distribution;

    fn rule() -> QuadratureRule {
        QuadratureRule::gauss_hermite(DEFAULT_QUAD_ORDER).unwrap()
    }

    fn theory_cfg(kind: WeightKind, g: f64, sigma_b: f64, r: f64) -> TheoryConfig {
        TheoryConfig {
            width: 200,
            gain: g,
            bias_var: sigma_b,
            corr_r: r,
            kind,
            small_g_mode: false,
            plain_fourth_moment: false,
        }
    }

    fn synthetic_state(k1: f64, k2: f64, q: f64, n_sigma: f64) -> TheoryState {
        TheoryState {
            layer: 0,
            k1,
            k2,
            q,
            n_sigma,
            d_tilde: k1 * k1 / (n_sigma + k2),
            gamma1: 1.0,
            gamma2: 1.0,
            kappa: 0.0,
        }
    }

    fn input_state(seed: u64) -> TheoryState {
        let spec = InputEnsembleSpec {
            width: 200,
            pattern_count: 400,
            pattern_std: 0.5,
        };
        let sampler = InputSampler::draw_ensemble(&spec, &mut RandomSource::new(seed)).unwrap();
        TheoryState::from_input_covariance(sampler.lambda()).unwrap()
    }

    #[test]
    fn k_coefficients_small_g_limit() {
        let cfg = TheoryConfig {
            gain: 1e-8,
            bias_var: 0.0,
            ..theory_cfg(WeightKind::Binary, 1e-8, 0.0, 0.0)
        };
        let state = synthetic_state(0.5, 0.25, 0.0, 0.1);
        let m = k_coefficients(&state, &cfg, &rule()).unwrap();
        assert_abs_diff_eq!(m.kbar_ii, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m.kbar_ii_sq, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m.kbar_ij_sq, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn k_coefficients_factorize_at_rho_zero() {
        let cfg = theory_cfg(WeightKind::Binary, 0.9, 0.1, 0.0);
        let state = synthetic_state(0.4, 0.2, 0.05, 0.1);
        let m = k_coefficients(&state, &cfg, &rule()).unwrap();
        assert_abs_diff_eq!(m.kbar_ij_sq, m.kbar_ii * m.kbar_ii, epsilon = 1e-13);
    }

    #[test]
    fn kappa_matches_monte_carlo_nested_expectation() {
        // MC over the four outer Gaussians, inner averages by quadrature;
        // exercises both the input layer (Q = 0) and a generic state.
        let r = rule();
        for (q_act, k1, rho_r) in [(0.0, 0.5, 0.5), (0.05, 0.3, 2.0)] {
            let cfg = theory_cfg(WeightKind::Binary, 0.9, 0.1, rho_r);
            let state = synthetic_state(k1, k1 * k1, q_act, 0.1);
            let m = k_coefficients(&state, &cfg, &r).unwrap();

            let g2 = cfg.gain * cfg.gain;
            let thermal = (g2 * k1).sqrt();
            let mean_std = (g2 * q_act).sqrt();
            let bias_std = cfg.bias_var.sqrt();
            let rho = cfg.rho();
            let normal = rand_distr::StandardNormal;
            let mut rng = RandomSource::new(314);
            let n = 1_000_000usize;
            let (mut sum, mut sumsq) = (0.0, 0.0);
            for _ in 0..n {
                let z1: f64 = normal.sample(&mut rng);
                let z2: f64 = normal.sample(&mut rng);
                let u1: f64 = normal.sample(&mut rng);
                let u2: f64 = normal.sample(&mut rng);
                let zeta1 = mean_std * z1 + bias_std * u1;
                let zeta2 = mean_std * (rho * z1 + (1.0 - rho * rho).sqrt() * z2) + bias_std * u2;
                let t1 = thermal_t(thermal, zeta1, &r);
                let t2 = thermal_t(thermal, zeta2, &r);
                let v = t1 * t1 * t2 * t2;
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n as f64;
            let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(
                (m.kbar_ij_sq - mean).abs() <= 3.0 * se.max(1e-12),
                "kappa {} vs MC {mean} (se {se}) at Q={q_act}",
                m.kbar_ij_sq
            );
        }
    }

    #[test]
    fn diagonal_moments_match_monte_carlo() {
        let r = rule();
        let cfg = theory_cfg(WeightKind::Binary, 0.9, 0.1, 0.5);
        let state = synthetic_state(0.5, 0.25, 0.0, 0.1);
        let m = k_coefficients(&state, &cfg, &r).unwrap();
        let g2 = cfg.gain * cfg.gain;
        let thermal = (g2 * state.k1).sqrt();
        let s_eff = (cfg.bias_var + g2 * state.q).sqrt();
        let normal = rand_distr::StandardNormal;
        let mut rng = RandomSource::new(2718);
        let n = 1_000_000usize;
        let (mut s2, mut s4) = (0.0, 0.0);
        for _ in 0..n {
            let x: f64 = normal.sample(&mut rng);
            let t = thermal_t(thermal, s_eff * x, &r);
            s2 += t * t;
            s4 += t * t * t * t;
        }
        let (m2, m4) = (s2 / n as f64, s4 / n as f64);
        assert!((m.kbar_ii - m2).abs() <= 5e-4, "{} vs {m2}", m.kbar_ii);
        assert!(
            (m.kbar_ii_sq - m4).abs() <= 5e-4,
            "{} vs {m4}",
            m.kbar_ii_sq
        );
    }

    #[test]
    fn sigma_step_orthogonal_case_and_affinity() {
        let cfg = theory_cfg(WeightKind::Binary, 0.9, 0.1, 0.0);
        let kappa = 0.37;
        let state = synthetic_state(0.2, 0.2, 0.0, 0.1);
        let got = sigma_step(&state, &cfg, kappa);
        let g4 = 0.9f64.powi(4);
        assert_abs_diff_eq!(got, g4 * kappa * (0.1 + 0.2), epsilon = 1e-15);

        // slope check: difference in N*Sigma maps through exactly g^4 kappa
        let state2 = synthetic_state(0.2, 0.2, 0.0, 0.35);
        let diff = sigma_step(&state2, &cfg, kappa) - got;
        assert_abs_diff_eq!(diff, g4 * kappa * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn sigma_step_direct_formula_value() {
        let cfg = theory_cfg(WeightKind::Binary, 0.9, 0.1, 0.5);
        let r = rule();
        let state = synthetic_state(0.2, 0.2, 0.0, 0.1);
        let kappa = k_coefficients(&state, &cfg, &r).unwrap().kbar_ij_sq;
        let got = sigma_step(&state, &cfg, kappa);
        // independent evaluation of the displayed map
        let want = 0.9_f64.powi(4) * kappa * (0.1 + 0.2 + 0.5 * 0.5 * 0.2 * 0.2);
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
    }

    #[test]
    fn sigma_step_finite_n_difference_is_small() {
        let cfg = theory_cfg(WeightKind::Binary, 0.9, 0.1, 0.5);
        let state = input_state(1);
        let kappa = 0.3;
        let large = sigma_step(&state, &cfg, kappa);
        let finite = sigma_step_finite_n(&state, &cfg, kappa);
        let rel = (large - finite).abs() / large.abs();
        // q = r/sqrt(N) leaves only O(q^2) = O(r^2/N) discrepancy
        assert!(rel < 5.0 * 0.25 / 200.0, "relative difference {rel}");

        let ccfg = theory_cfg(WeightKind::Continuous, 0.9, 0.1, 0.5);
        let large = sigma_step(&state, &ccfg, kappa);
        let finite = sigma_step_finite_n(&state, &ccfg, kappa);
        let rel = (large - finite).abs() / large.abs();
        assert!(rel < 5.0 / 200.0, "continuous relative difference {rel}");
    }

    #[test]
    fn operating_point_values_and_fixed_point() {
        // Upsilon = 0.5 via g = 1, kappa = 0.5
        let cfg = theory_cfg(WeightKind::Binary, 1.0, 0.1, 0.0);
        let state = synthetic_state(0.3, 0.1, 0.0, 0.0);
        let kappa = 0.5;
        let star = operating_point(&state, &cfg, kappa).unwrap();
        assert_abs_diff_eq!(star, 0.1, epsilon = 1e-15);

        let cfg_r = theory_cfg(WeightKind::Binary, 1.0, 0.1, 1.0);
        let star_r = operating_point(&state, &cfg_r, kappa).unwrap();
        assert_abs_diff_eq!(star_r, 0.1 + 0.09, epsilon = 1e-15);

        // fixed-point property
        let mut at_star = state;
        at_star.n_sigma = star_r;
        let mapped = sigma_step(&at_star, &cfg_r, kappa);
        assert!(
            (mapped - star_r).abs() < 1e-12,
            "residual {}",
            mapped - star_r
        );

        // non-contractive regime
        let bad = operating_point(&state, &cfg, 1.0);
        assert!(bad.is_err());
    }

    #[test]
    fn theory_step_two_routes_agree() {
        let r = rule();
        for kind in [WeightKind::Binary, WeightKind::Continuous] {
            for small_g in [false, true] {
                let cfg = TheoryConfig {
                    small_g_mode: small_g,
                    ..theory_cfg(kind, 0.9, 0.1, 0.5)
                };
                let state = input_state(2);
                let next = theory_step(&state, &cfg, &r).unwrap();
                let direct = dimensionality_formula(&state, next.gamma1, next.gamma2, &cfg);
                assert!(
                    (direct - next.d_tilde).abs() <= 1e-10 * next.d_tilde,
                    "direct {direct} vs identity {} ({kind:?}, small_g={small_g})",
                    next.d_tilde
                );
                // internal identity of the produced state
                assert_abs_diff_eq!(
                    next.d_tilde,
                    next.k1 * next.k1 / (next.n_sigma + next.k2),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn theory_step_monotone_in_r() {
        let r = rule();
        let state = input_state(3);
        let mut prev_d = f64::INFINITY;
        for corr in [0.0, 0.5, 1.0, 2.0] {
            let cfg = theory_cfg(WeightKind::Binary, 0.9, 0.1, corr);
            let next = theory_step(&state, &cfg, &r).unwrap();
            assert!(
                next.d_tilde < prev_d,
                "D~ not decreasing in r at r = {corr}: {} vs {prev_d}",
                next.d_tilde
            );
            prev_d = next.d_tilde;
        }
    }

    #[test]
    fn gamma_inequalities_hold_on_a_grid() {
        let r = rule();
        let state = input_state(4);
        for &g in &[0.1, 0.4, 0.9, 1.5] {
            for &sb in &[0.0, 0.1, 0.5] {
                for &corr in &[0.0, 0.5, 2.0] {
                    for small_g in [false, true] {
                        let cfg = TheoryConfig {
                            small_g_mode: small_g,
                            ..theory_cfg(WeightKind::Binary, g, sb, corr)
                        };
                        let mut s = state;
                        for _ in 0..4 {
                            s = theory_step(&s, &cfg, &r).unwrap();
                            assert!(
                                s.gamma1 <= s.gamma2 + 1e-12,
                                "gamma1 {} > gamma2 {} at g={g}, sb={sb}, r={corr}",
                                s.gamma1,
                                s.gamma2
                            );
                            assert!(
                                s.gamma2 >= 1.0 - 1e-12,
                                "gamma2 {} < 1 at g={g}, sb={sb}, r={corr}",
                                s.gamma2
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn kind_consistency_under_r_rescaling() {
        // binary at r matches continuous at r * g^2, state for state
        let r = rule();
        let g = 0.9;
        let state = input_state(5);
        let bcfg = theory_cfg(WeightKind::Binary, g, 0.1, 0.5);
        let ccfg = theory_cfg(WeightKind::Continuous, g, 0.1, 0.5 * g * g);
        let b = run_theory(&bcfg, &state, 4, &r).unwrap();
        let c = run_theory(&ccfg, &state, 4, &r).unwrap();
        for (sb, sc) in b.iter().zip(&c) {
            assert_abs_diff_eq!(sb.d_tilde, sc.d_tilde, epsilon = 1e-12);
            assert_abs_diff_eq!(sb.n_sigma, sc.n_sigma, epsilon = 1e-12);
            assert_abs_diff_eq!(sb.gamma1, sc.gamma1, epsilon = 1e-12);
        }
    }

    #[test]
    fn transient_expansion_condition() {
        let r = rule();
        let cfg = theory_cfg(WeightKind::Binary, 0.9, 0.1, 1.0);
        // gamma ratios depend on (K1, Q) only, so probe them first
        let probe = synthetic_state(0.4, 0.18, 0.02, 0.05);
        let next = theory_step(&probe, &cfg, &r).unwrap();
        let g1 = next.gamma1;
        assert!(g1 < 1.0, "test needs gamma1 < 1, got {g1}");
        let additive = additive_term(&next, probe.k1, &cfg);
        let threshold = additive / (1.0 - g1) - probe.k2;

        for (n_sigma, expect_grow) in [(threshold * 1.5, true), (threshold * 0.5, false)] {
            let state = synthetic_state(probe.k1, probe.k2, probe.q, n_sigma);
            let stepped = theory_step(&state, &cfg, &r).unwrap();
            assert_eq!(
                stepped.d_tilde > state.d_tilde,
                expect_grow,
                "N*Sigma = {n_sigma}, threshold {threshold}: D~ {} -> {}",
                state.d_tilde,
                stepped.d_tilde
            );
        }
    }

    #[test]
    fn run_theory_depth_zero_and_r_orderings() {
        let r = rule();
        let state = input_state(6);
        let cfg = theory_cfg(WeightKind::Binary, 0.9, 0.1, 0.0);
        let only_init = run_theory(&cfg, &state, 0, &r).unwrap();
        assert_eq!(only_init.len(), 1);

        let with_r = theory_cfg(WeightKind::Binary, 0.9, 0.1, 0.5);
        let base = run_theory(&cfg, &state, 4, &r).unwrap();
        let corr = run_theory(&with_r, &state, 4, &r).unwrap();
        for l in 1..=4 {
            assert!(corr[l].d_tilde < base[l].d_tilde, "layer {l} D~ ordering");
            assert!(
                corr[l].n_sigma > base[l].n_sigma,
                "layer {l} N*Sigma ordering"
            );
        }
    }

    #[test]
    fn gamma1_grows_toward_unity_with_depth() {
        let r = rule();
        let state = input_state(7);
        let cfg = theory_cfg(WeightKind::Binary, 0.4, 0.1, 0.5);
        let traj = run_theory(&cfg, &state, 4, &r).unwrap();
        assert!(
            traj[4].gamma1 > traj[1].gamma1,
            "gamma1 layer4 {} vs layer1 {}",
            traj[4].gamma1,
            traj[1].gamma1
        );
        assert!(traj[4].gamma1 <= 1.0 + 1e-12);
    }

    #[test]
    fn gamma1_close_to_one_at_small_g_orthogonal() {
        let r = rule();
        let state = input_state(8);
        for &g in &[0.1, 0.2, 0.3, 0.4] {
            let cfg = theory_cfg(WeightKind::Binary, g, 0.1, 0.0);
            let traj = run_theory(&cfg, &state, 4, &r).unwrap();
            for s in &traj[1..] {
                assert!(
                    (s.gamma1 - 1.0).abs() < 0.05,
                    "gamma1 = {} at g = {g}, layer {}",
                    s.gamma1,
                    s.layer
                );
            }
        }
    }

    #[test]
    fn rho_bound_rejected_for_continuous() {
        let cfg = theory_cfg(WeightKind::Continuous, 0.1, 0.1, 2.0);
        assert!(cfg.rho() > 1.0);
        let state = synthetic_state(0.5, 0.25, 0.0, 0.1);
        assert!(matches!(
            k_coefficients(&state, &cfg, &rule()),
            Err(Error::Scaling(_))
        ));
    }

    #[test]
    fn expansion_check_zero_delta() {
        let n = 6;
        let cfg = NetworkConfig {
            width: n,
            depth: 1,
            gain: 0.5,
            bias_var: 0.1,
            corr_r: 0.0,
            kind: WeightKind::Continuous,
        };
        let layer = crate::ensemble::sample_layer(&cfg, &mut RandomSource::new(9)).unwrap();
        let prev = ActivityMoments::zero_mean(SymMatrix::zeros(n));
        let rep = expansion_check(&layer, &prev, &cfg, &rule()).unwrap();
        assert_eq!(rep.rms_exact, 0.0);
        assert_eq!(rep.mean_rel, 0.0);
    }

    #[test]
    fn expansion_check_small_g_accuracy() {
        let n = 100;
        let spec = InputEnsembleSpec {
            width: n,
            pattern_count: 2 * n,
            pattern_std: 0.5,
        };
        let mut rs = RandomSource::new(10);
        let sampler = InputSampler::draw_ensemble(&spec, &mut rs).unwrap();
        let prev = ActivityMoments::zero_mean(sampler.lambda().clone());

        // continuous scaling caps r at g^2 sqrt(N) = 0.4 for g = 0.2
        let small = NetworkConfig {
            width: n,
            depth: 1,
            gain: 0.2,
            bias_var: 0.1,
            corr_r: 0.3,
            kind: WeightKind::Continuous,
        };
        let layer = crate::ensemble::sample_layer(&small, &mut rs).unwrap();
        let rep = expansion_check(&layer, &prev, &small, &rule()).unwrap();
        assert!(rep.mean_rel < 0.02, "mean relative error {}", rep.mean_rel);

        // at g = 0.9 the expansion degrades; report only
        let large = NetworkConfig { gain: 0.9, ..small };
        let layer = crate::ensemble::sample_layer(&large, &mut rs).unwrap();
        let rep_large = expansion_check(&layer, &prev, &large, &rule()).unwrap();
        assert!(rep_large.mean_rel > rep.mean_rel);
        println!(
            "expansion breakdown at g=0.9: mean_rel = {:.4}, max_rel = {:.4}",
            rep_large.mean_rel, rep_large.max_rel
        );
    }
}
