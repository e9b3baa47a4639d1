//! Quenched network parameters and the synthetic input ensemble.
//!
//! Weight columns (one per presynaptic neuron) carry the inter-receptive-
//! field correlation: entries of column k across rows i are exchangeable
//! with pairwise covariance q, either as sign-thresholded Gaussians
//! (binary kind, dichotomized Gaussian construction) or directly Gaussian
//! (continuous kind). Columns are mutually independent; there is no
//! intra-RF correlation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky, RandomSource, SymMatrix};

/// Weight-value kind of a network ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    /// ±1 entries with unit diagonal second moment; pre-activations carry
    /// a g/sqrt(N) prefactor.
    Binary,
    /// Gaussian entries with variance g^2/N.
    Continuous,
}

/// Hyperparameters of one network ensemble.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Layer width N (equal across layers).
    pub width: usize,
    /// Number of hidden layers d.
    pub depth: usize,
    /// Weight-scale parameter g.
    pub gain: f64,
    /// Bias variance sigma_b (a variance, not a standard deviation).
    pub bias_var: f64,
    /// Scaled synaptic correlation r, order one.
    pub corr_r: f64,
    pub kind: WeightKind,
}

impl NetworkConfig {
    /// Synaptic correlation level q implied by the scaling form of the
    /// weight kind: q = r/sqrt(N) for binary, q = r/N^(3/2) for continuous.
    pub fn q(&self) -> f64 {
        let n = self.width as f64;
        match self.kind {
            WeightKind::Binary => self.corr_r / n.sqrt(),
            WeightKind::Continuous => self.corr_r / n.powf(1.5),
        }
    }

    /// Fails fast when the scaling bounds make the ensemble ill-defined.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("network width must be positive".into()));
        }
        if self.gain <= 0.0 {
            return Err(Error::Config("gain g must be positive".into()));
        }
        if self.bias_var < 0.0 {
            return Err(Error::Config("bias variance must be nonnegative".into()));
        }
        if self.corr_r < 0.0 {
            return Err(Error::Config(
                "correlation level r must be nonnegative".into(),
            ));
        }
        let n = self.width as f64;
        match self.kind {
            WeightKind::Binary => {
                if self.q() >= 1.0 {
                    return Err(Error::Scaling(format!(
                        "binary scaling requires q = r/sqrt(N) < 1; got r = {} with N = {} (needs r < {})",
                        self.corr_r,
                        self.width,
                        n.sqrt()
                    )));
                }
            }
            WeightKind::Continuous => {
                let bound = self.gain * self.gain * n.sqrt();
                if self.corr_r > bound {
                    return Err(Error::Scaling(format!(
                        "continuous scaling requires q = r/N^(3/2) <= g^2/N, i.e. r <= g^2*sqrt(N); got r = {} > {}",
                        self.corr_r, bound
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One quenched realization of a layer: its weight matrix (row i is the
/// receptive field of neuron i at the upper layer) and bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

/// Synthetic input ensemble: Gaussian samples with covariance
/// `Lambda = xi * xi^T / N` built from an N x P pattern matrix.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InputEnsembleSpec {
    pub width: usize,
    pub pattern_count: usize,
    /// Standard deviation of the pattern entries.
    pub pattern_std: f64,
}

impl InputEnsembleSpec {
    pub fn alpha(&self) -> f64 {
        self.pattern_count as f64 / self.width as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.pattern_count == 0 {
            return Err(Error::Config("input ensemble needs N > 0 and P > 0".into()));
        }
        if self.pattern_std <= 0.0 {
            return Err(Error::Config("pattern std must be positive".into()));
        }
        Ok(())
    }
}

/// Latent threshold for the dichotomized Gaussian: binary correlation q
/// is produced by latent Gaussian correlation `sin(pi*q/2)`.
pub fn dg_threshold(q: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Domain(format!(
            "dichotomized Gaussian correlation q must lie in [0, 1), got {q}"
        )));
    }
    Ok((std::f64::consts::FRAC_PI_2 * q).sin())
}

/// Draws one exchangeable Gaussian vector (diagonal `diag`, off-diagonal
/// `offdiag`) using the O(N) shared-factor decomposition when
/// `0 <= offdiag <= diag`, or dense Cholesky otherwise.
pub fn sample_exchangeable(
    n: usize,
    diag: f64,
    offdiag: f64,
    rs: &mut RandomSource,
) -> Result<Vec<f64>> {
    if diag <= 0.0 {
        return Err(Error::Domain(
            "exchangeable diagonal must be positive".into(),
        ));
    }
    if offdiag >= 0.0 && offdiag <= diag {
        let shared = offdiag.sqrt() * rs.next_standard_normal();
        let own_std = (diag - offdiag).sqrt();
        let mut out = rs.standard_normals(n);
        for v in &mut out {
            *v = shared + own_std * *v;
        }
        Ok(out)
    } else {
        sample_exchangeable_via_cholesky(n, diag, offdiag, rs)
    }
}

/// Dense-Cholesky route for the exchangeable Gaussian; equivalent in law
/// to the shared-factor route on its validity range, and the fallback
/// outside it.
pub fn sample_exchangeable_via_cholesky(
    n: usize,
    diag: f64,
    offdiag: f64,
    rs: &mut RandomSource,
) -> Result<Vec<f64>> {
    let cov = SymMatrix::from_fn(n, |i, j| if i == j { diag } else { offdiag });
    let l = cholesky_with_jitter_retry(&cov)?;
    let eps = DVector::from_vec(rs.standard_normals(n));
    Ok((l * eps).iter().copied().collect())
}

/// Cholesky with the crate's jitter policy: try exactly as given, then
/// retry once with 1e-10 times the largest diagonal entry.
pub fn cholesky_with_jitter_retry(s: &SymMatrix) -> Result<DMatrix<f64>> {
    match cholesky(s, 0.0) {
        Ok(l) => Ok(l),
        Err(_) => {
            let max_diag = (0..s.dim()).map(|i| s.diag(i)).fold(0.0f64, f64::max);
            cholesky(s, 1e-10 * max_diag.max(1.0))
        }
    }
}

/// sign with sign(0) = +1.
#[inline]
fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Correlated ±1 weights via the dichotomized Gaussian: each column is an
/// exchangeable latent Gaussian (unit diagonal, off-diagonal sin(pi*q/2))
/// thresholded by sign.
pub fn sample_binary_weights(cfg: &NetworkConfig, rs: &mut RandomSource) -> Result<DMatrix<f64>> {
    if cfg.kind != WeightKind::Binary {
        return Err(Error::Config(
            "sample_binary_weights needs kind = binary".into(),
        ));
    }
    cfg.validate()?;
    let n = cfg.width;
    let sigma_dg = dg_threshold(cfg.q())?;
    let mut w = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let latent = sample_exchangeable(n, 1.0, sigma_dg, rs)?;
        for i in 0..n {
            w[(i, j)] = sign(latent[i]);
        }
    }
    Ok(w)
}

/// Correlated continuous weights: each column exchangeable Gaussian with
/// diagonal g^2/N and off-diagonal q.
pub fn sample_continuous_weights(
    cfg: &NetworkConfig,
    rs: &mut RandomSource,
) -> Result<DMatrix<f64>> {
    if cfg.kind != WeightKind::Continuous {
        return Err(Error::Config(
            "sample_continuous_weights needs kind = continuous".into(),
        ));
    }
    cfg.validate()?;
    let n = cfg.width;
    let diag = cfg.gain * cfg.gain / n as f64;
    let q = cfg.q();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let col = sample_exchangeable(n, diag, q, rs)?;
        for i in 0..n {
            w[(i, j)] = col[i];
        }
    }
    Ok(w)
}

/// i.i.d. N(0, sigma_b) biases; sigma_b is the variance.
pub fn sample_biases(cfg: &NetworkConfig, rs: &mut RandomSource) -> DVector<f64> {
    let std = cfg.bias_var.sqrt();
    let mut b = DVector::from_vec(rs.standard_normals(cfg.width));
    b *= std;
    b
}

/// Samples one layer's parameters.
pub fn sample_layer(cfg: &NetworkConfig, rs: &mut RandomSource) -> Result<LayerParams> {
    let weights = match cfg.kind {
        WeightKind::Binary => sample_binary_weights(cfg, rs)?,
        WeightKind::Continuous => sample_continuous_weights(cfg, rs)?,
    };
    let biases = sample_biases(cfg, rs);
    Ok(LayerParams { weights, biases })
}

/// Samples a full network: `depth` independent layers, each on its own
/// stream split from `rs`.
pub fn sample_network(cfg: &NetworkConfig, rs: &mut RandomSource) -> Result<Vec<LayerParams>> {
    cfg.validate()?;
    (0..cfg.depth)
        .map(|_| {
            let mut layer_rs = rs.split();
            sample_layer(cfg, &mut layer_rs)
        })
        .collect()
}

/// Draws multivariate normals with the exact covariance of one quenched
/// input ensemble. The factor is built once; batches of any size can then
/// be drawn repeatedly (streaming-friendly).
///
/// For alpha >= 1 sampling goes through a Cholesky factor of Lambda (with
/// one jitter retry); for alpha < 1 Lambda is rank deficient and samples
/// are generated as `xi * v / sqrt(N)` with `v ~ N(0, I_P)`, which
/// reproduces Lambda exactly without a factorization.
#[derive(Debug, Clone)]
pub struct InputSampler {
    width: usize,
    // factor F with samples = eps * F^T, eps i.i.d. standard normal
    factor_t: DMatrix<f64>,
    lambda: SymMatrix,
}

impl InputSampler {
    /// Draws the pattern matrix xi and forms `Lambda = xi*xi^T/N`.
    pub fn draw_ensemble(spec: &InputEnsembleSpec, rs: &mut RandomSource) -> Result<Self> {
        spec.validate()?;
        let n = spec.width;
        let p = spec.pattern_count;
        let sigma = spec.pattern_std;

        let mut xi = DMatrix::<f64>::zeros(n, p);
        for v in xi.iter_mut() {
            *v = sigma * rs.next_standard_normal();
        }
        let gram = &xi * xi.transpose();
        let lambda = SymMatrix::from_fn(n, |i, j| gram[(i, j)] / n as f64);

        let factor_t = if spec.alpha() >= 1.0 {
            cholesky_with_jitter_retry(&lambda)?.transpose()
        } else {
            (xi / (n as f64).sqrt()).transpose()
        };
        Ok(Self {
            width: n,
            factor_t,
            lambda,
        })
    }

    /// The exact covariance the sampler reproduces.
    pub fn lambda(&self) -> &SymMatrix {
        &self.lambda
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Draws `count` samples as rows.
    pub fn draw(&self, count: usize, rs: &mut RandomSource) -> DMatrix<f64> {
        let k = self.factor_t.nrows();
        let mut eps = DMatrix::<f64>::zeros(count, k);
        for v in eps.iter_mut() {
            *v = rs.next_standard_normal();
        }
        eps * &self.factor_t
    }
}

/// Draws the pattern matrix xi, forms `Lambda = xi*xi^T/N`, and samples
/// `count` inputs with exactly that covariance. Returned rows are samples.
pub fn sample_inputs(
    spec: &InputEnsembleSpec,
    count: usize,
    rs: &mut RandomSource,
) -> Result<(DMatrix<f64>, SymMatrix)> {
    let sampler = InputSampler::draw_ensemble(spec, rs)?;
    let samples = sampler.draw(count, rs);
    let lambda = sampler.lambda.clone();
    Ok((samples, lambda))
}

const NETWORK_MAGIC: &[u8; 4] = b"CSYN";

/// Flat little-endian dump of a sampled network for replay across runs.
/// Layout: magic, kind (u32), N (u32), d (u32), then per layer the
/// row-major weights followed by the biases, all f64 LE.
pub fn save_network(path: &Path, kind: WeightKind, layers: &[LayerParams]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_network_body(&mut w, kind, layers)?;
    w.flush()?;
    Ok(())
}

fn write_network_body(w: &mut impl Write, kind: WeightKind, layers: &[LayerParams]) -> Result<()> {
    let n = layers.first().map_or(0, |l| l.weights.nrows());
    w.write_all(NETWORK_MAGIC)?;
    let kind_code: u32 = match kind {
        WeightKind::Binary => 0,
        WeightKind::Continuous => 1,
    };
    w.write_all(&kind_code.to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for layer in layers {
        for i in 0..layer.weights.nrows() {
            for j in 0..layer.weights.ncols() {
                w.write_all(&layer.weights[(i, j)].to_le_bytes())?;
            }
        }
        for i in 0..layer.biases.len() {
            w.write_all(&layer.biases[i].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_network(path: &Path) -> Result<(WeightKind, Vec<LayerParams>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NETWORK_MAGIC {
        return Err(Error::Config(format!(
            "bad network file magic {magic:?} in {}",
            path.display()
        )));
    }
    let kind = match read_u32(&mut r)? {
        0 => WeightKind::Binary,
        1 => WeightKind::Continuous,
        other => return Err(Error::Config(format!("unknown weight kind code {other}"))),
    };
    let n = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(d);
    for _ in 0..d {
        let mut weights = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                weights[(i, j)] = read_f64(&mut r)?;
            }
        }
        let mut biases = DVector::<f64>::zeros(n);
        for i in 0..n {
            biases[i] = read_f64(&mut r)?;
        }
        layers.push(LayerParams { weights, biases });
    }
    Ok((kind, layers))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
