//! On-line layer-wise Hebbian trainer with synaptic rescaling and the
//! inter-receptive-field correlation-constraint regularizer, plus the
//! post-training dimensionality/decorrelation diagnostics.
//!
//! The penalty drives each column's off-diagonal pair sum toward
//! `sqrt(N) r`, and per-row rescaling pins every receptive field to norm
//! g, so synapses compete while the prescribed correlation level is
//! learned rather than imposed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    sample_continuous_weights, InputEnsembleSpec, InputSampler, NetworkConfig, WeightKind,
};
use crate::error::{Error, Result};
use crate::numerics::RandomSource;
use crate::stats::{layer_summary, LayerSummary};

/// Weight initialization for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Continuous correlated ensemble at the configured (g, r).
    Correlated,
    /// i.i.d. N(0, g^2/N) entries.
    Iid,
}

/// How layers consume the sample stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateOrder {
    /// Every sample updates all layers from the same forward pass.
    Simultaneous,
    /// Layer 1 sees the whole stream, then layer 2, and so on.
    Layerwise,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HebbianConfig {
    pub width: usize,
    pub depth: usize,
    /// Learning rate eta.
    pub learning_rate: f64,
    /// Penalty strength kappa_c.
    pub penalty: f64,
    /// Row-norm rescaling target g.
    pub gain: f64,
    /// Correlation target r in the penalty.
    pub corr_r: f64,
    /// Training stream length.
    pub sample_count: usize,
    /// Held-out evaluation batch size.
    pub eval_count: usize,
    pub init: InitKind,
    pub order: UpdateOrder,
}

impl HebbianConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config(
                "hebbian network needs width and depth".into(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        if self.gain <= 0.0 {
            return Err(Error::Config("rescaling gain must be positive".into()));
        }
        if self.penalty < 0.0 || self.corr_r < 0.0 {
            return Err(Error::Config("penalty and r must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Trainable weight stack; no biases. Rows are receptive fields and are
/// rescaled to norm g after every update.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: Vec<DMatrix<f64>>,
    pub step: u64,
}

impl TrainState {
    /// Fresh state: sampled init, then an initial rescale so the row-norm
    /// invariant holds from step zero.
    pub fn init(cfg: &HebbianConfig, rs: &mut RandomSource) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.width;
        let mut weights = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let mut layer_rs = rs.split();
            let mut w = match cfg.init {
                InitKind::Correlated => {
                    let net_cfg = NetworkConfig {
                        width: n,
                        depth: 1,
                        gain: cfg.gain,
                        bias_var: 0.0,
                        corr_r: cfg.corr_r,
                        kind: WeightKind::Continuous,
                    };
                    net_cfg.validate()?;
                    sample_continuous_weights(&net_cfg, &mut layer_rs)?
                }
                InitKind::Iid => {
                    let std = cfg.gain / (n as f64).sqrt();
                    DMatrix::from_fn(n, n, |_, _| std * layer_rs.next_standard_normal())
                }
            };
            rescale_rows(&mut w, cfg.gain)?;
            weights.push(w);
        }
        Ok(Self { weights, step: 0 })
    }
}

/// Correlation-constraint objective
/// `Phi_c = (kappa_c/2) sum_j [sum_{i != i'} w_ij w_i'j - sqrt(N) r]^2`,
/// with the ordered pair sum `(sum_i w_ij)^2 - sum_i w_ij^2`.
pub fn penalty_value(w: &DMatrix<f64>, r: f64, kappa_c: f64) -> f64 {
    let n = w.nrows();
    let target = (n as f64).sqrt() * r;
    let mut acc = 0.0;
    for j in 0..w.ncols() {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let v = w[(i, j)];
            sum += v;
            sum_sq += v * v;
        }
        let pair = sum * sum - sum_sq;
        acc += (pair - target) * (pair - target);
    }
    0.5 * kappa_c * acc
}

/// Exact gradient of `penalty_value` with respect to each weight:
/// `dPhi/dw_ij = 2 kappa_c (sum_{i' != i} w_i'j)(pair_j - sqrt(N) r)`.
pub fn penalty_gradient(w: &DMatrix<f64>, r: f64, kappa_c: f64) -> DMatrix<f64> {
    let n = w.nrows();
    let target = (n as f64).sqrt() * r;
    let mut grad = DMatrix::zeros(n, w.ncols());
    for j in 0..w.ncols() {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let v = w[(i, j)];
            sum += v;
            sum_sq += v * v;
        }
        let resid = sum * sum - sum_sq - target;
        for i in 0..n {
            grad[(i, j)] = 2.0 * kappa_c * (sum - w[(i, j)]) * resid;
        }
    }
    grad
}

/// One regularized Hebbian update of a single layer from the activations
/// of the current forward pass: `w_ij += eta (post_i pre_j - grad_ij)`.
/// Rescaling is a separate step.
pub fn hebbian_update(
    w: &mut DMatrix<f64>,
    pre: &DVector<f64>,
    post: &DVector<f64>,
    cfg: &HebbianConfig,
    step: u64,
) -> Result<()> {
    if pre.iter().chain(post.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite activation at training step {step}"
        )));
    }
    let grad = if cfg.penalty > 0.0 {
        Some(penalty_gradient(w, cfg.corr_r, cfg.penalty))
    } else {
        None
    };
    let eta = cfg.learning_rate;
    for j in 0..w.ncols() {
        for i in 0..w.nrows() {
            let hebb = post[i] * pre[j];
            let reg = grad.as_ref().map_or(0.0, |g| g[(i, j)]);
            w[(i, j)] += eta * (hebb - reg);
        }
    }
    Ok(())
}

/// Synaptic rescaling: every row to Euclidean norm g, direction kept.
pub fn rescale_rows(w: &mut DMatrix<f64>, g: f64) -> Result<()> {
    for i in 0..w.nrows() {
        let norm: f64 = (0..w.ncols())
            .map(|j| w[(i, j)] * w[(i, j)])
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::Training(format!("cannot rescale all-zero row {i}")));
        }
        let scale = g / norm;
        for j in 0..w.ncols() {
            w[(i, j)] *= scale;
        }
    }
    Ok(())
}

fn forward(state: &TrainState, input: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut acts = Vec::with_capacity(state.weights.len() + 1);
    acts.push(input.clone());
    for w in &state.weights {
        let z = w * acts.last().unwrap();
        acts.push(z.map(f64::tanh));
    }
    acts
}

/// Trains one realization on the given sample stream (rows of `inputs`,
/// consumed in order) and evaluates on a held-out batch drawn from the
/// same ensemble. Returns the final state and per-layer summaries
/// (entry 0 is the input layer).
pub fn train_network(
    cfg: &HebbianConfig,
    inputs: &DMatrix<f64>,
    eval_sampler: &InputSampler,
    rs: &mut RandomSource,
) -> Result<(TrainState, Vec<LayerSummary>)> {
    cfg.validate()?;
    let mut state = TrainState::init(cfg, rs)?;
    match cfg.order {
        UpdateOrder::Simultaneous => {
            for s in 0..inputs.nrows() {
                let x = DVector::from_fn(cfg.width, |i, _| inputs[(s, i)]);
                let acts = forward(&state, &x);
                state.step += 1;
                for (l, w) in state.weights.iter_mut().enumerate() {
                    hebbian_update(w, &acts[l], &acts[l + 1], cfg, state.step)?;
                }
                for w in state.weights.iter_mut() {
                    rescale_rows(w, cfg.gain)?;
                }
            }
        }
        UpdateOrder::Layerwise => {
            for l in 0..cfg.depth {
                for s in 0..inputs.nrows() {
                    let x = DVector::from_fn(cfg.width, |i, _| inputs[(s, i)]);
                    let acts = forward(&state, &x);
                    state.step += 1;
                    hebbian_update(
                        &mut state.weights[l],
                        &acts[l],
                        &acts[l + 1],
                        cfg,
                        state.step,
                    )?;
                    rescale_rows(&mut state.weights[l], cfg.gain)?;
                }
            }
        }
    }
    let summaries = evaluate(cfg, &state, eval_sampler, rs)?;
    Ok((state, summaries))
}

/// Propagates a held-out batch through the trained weights and summarizes
/// every layer (index 0 = inputs).
pub fn evaluate(
    cfg: &HebbianConfig,
    state: &TrainState,
    sampler: &InputSampler,
    rs: &mut RandomSource,
) -> Result<Vec<LayerSummary>> {
    let batch = sampler.draw(cfg.eval_count, rs);
    let mut summaries = Vec::with_capacity(cfg.depth + 1);
    let mut current = batch;
    summaries.push(layer_summary(&crate::propagation::moments_from_samples(
        &crate::propagation::SampleBatch::new(current.clone()),
    )?)?);
    for w in &state.weights {
        let mut z = &current * w.transpose();
        for v in z.iter_mut() {
            *v = v.tanh();
        }
        current = z;
        summaries.push(layer_summary(&crate::propagation::moments_from_samples(
            &crate::propagation::SampleBatch::new(current.clone()),
        )?)?);
    }
    Ok(summaries)
}

/// Aggregate of one quantity over realizations.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

/// Per-layer summaries averaged over independent realizations (fresh
/// data stream and initialization per realization), run in parallel on
/// split streams with a deterministic reduction.
pub fn run_hebbian(
    cfg: &HebbianConfig,
    spec: &InputEnsembleSpec,
    realizations: usize,
    rs: &mut RandomSource,
) -> Result<Vec<Vec<LayerSummary>>> {
    if spec.width != cfg.width {
        return Err(Error::Config(format!(
            "input width {} vs network width {}",
            spec.width, cfg.width
        )));
    }
    let sources: Vec<RandomSource> = (0..realizations).map(|_| rs.split()).collect();
    sources
        .into_par_iter()
        .map(|mut src| {
            let sampler = InputSampler::draw_ensemble(spec, &mut src)?;
            let stream = sampler.draw(cfg.sample_count, &mut src);
            let (_, summaries) = train_network(cfg, &stream, &sampler, &mut src)?;
            Ok(summaries)
        })
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CSYC";

/// Checkpoint: the network dump layout plus the step counter. Hebbian
/// networks carry no biases, so zeros are written in their place.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = state.weights.first().map_or(0, |m| m.nrows());
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?; // continuous kind
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(state.weights.len() as u32).to_le_bytes())?;
    w.write_all(&state.step.to_le_bytes())?;
    for layer in &state.weights {
        for i in 0..layer.nrows() {
            for j in 0..layer.ncols() {
                w.write_all(&layer[(i, j)].to_le_bytes())?;
            }
        }
        for _ in 0..n {
            w.write_all(&0f64.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Config(format!(
            "bad checkpoint magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?; // kind, always continuous
    r.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let d = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let step = u64::from_le_bytes(u64buf);
    let mut weights = Vec::with_capacity(d);
    let mut f64buf = [0u8; 8];
    for _ in 0..d {
        let mut w = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                r.read_exact(&mut f64buf)?;
                w[(i, j)] = f64::from_le_bytes(f64buf);
            }
        }
        for _ in 0..n {
            r.read_exact(&mut f64buf)?; // discard zero biases
        }
        weights.push(w);
    }
    Ok(TrainState { weights, step })
}
