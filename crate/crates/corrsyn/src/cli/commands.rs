use std::path::{Path, PathBuf};

use crate::cli::config::ExperimentConfig;
use crate::cli::output::{format_float, mean_stderr, CsvWriter};
use crate::ensemble::{sample_network, InputSampler};
use crate::error::Result;
use crate::numerics::{QuadratureRule, RandomSource, DEFAULT_QUAD_ORDER};
use crate::propagation::{
    propagate_moments, propagate_sample_moments, ActivityMoments, SampleBatch,
};
use crate::stats::{
    layer_summary, mp_normalized_dim, participation_ratio, spectrum_report, LayerSummary,
};
use crate::theory::{
    additive_term, k_coefficients, operating_point, run_theory, sigma_step, TheoryState,
};

/// Files written by a command (the manifest is the runner's job).
#[derive(Debug, Clone)]
pub struct CommandOutcome {
    pub files: Vec<PathBuf>,
}

// Stream-id layout: one domain per independent random role, so matching
// (seed, instance) pairs share the input ensemble and network draws
// across commands.
fn input_stream(instance: usize) -> u64 {
    (1u64 << 32) | instance as u64
}

fn network_stream(instance: usize) -> u64 {
    (2u64 << 32) | instance as u64
}

fn sample_stream(instance: usize) -> u64 {
    (3u64 << 32) | instance as u64
}

fn quad_rule() -> Result<QuadratureRule> {
    QuadratureRule::gauss_hermite(DEFAULT_QUAD_ORDER)
}

const LAYER_HEADER: [&str; 7] = ["instance", "layer", "d_tilde", "n_sigma", "k1", "k2", "q"];
const SUMMARY_HEADER: [&str; 11] = [
    "layer",
    "d_tilde_mean",
    "d_tilde_stderr",
    "n_sigma_mean",
    "n_sigma_stderr",
    "k1_mean",
    "k1_stderr",
    "k2_mean",
    "k2_stderr",
    "q_mean",
    "q_stderr",
];

fn summary_row(instance: usize, layer: usize, s: &LayerSummary) -> Vec<String> {
    vec![
        instance.to_string(),
        layer.to_string(),
        format_float(s.d_tilde),
        format_float(s.n_sigma),
        format_float(s.k1),
        format_float(s.k2),
        format_float(s.q),
    ]
}

fn write_layer_files(
    out_dir: &Path,
    prefix: &str,
    per_instance: &[Vec<LayerSummary>],
) -> Result<CommandOutcome> {
    let layers_path = out_dir.join(format!("{prefix}_layers.csv"));
    let mut w = CsvWriter::create(&layers_path, &LAYER_HEADER)?;
    for (i, summaries) in per_instance.iter().enumerate() {
        for (l, s) in summaries.iter().enumerate() {
            w.row(&summary_row(i, l, s))?;
        }
    }
    w.finish()?;

    let summary_path = out_dir.join(format!("{prefix}_summary.csv"));
    let mut w = CsvWriter::create(&summary_path, &SUMMARY_HEADER)?;
    let depth = per_instance[0].len();
    for l in 0..depth {
        let col = |f: fn(&LayerSummary) -> f64| -> (f64, f64) {
            let vals: Vec<f64> = per_instance.iter().map(|inst| f(&inst[l])).collect();
            mean_stderr(&vals)
        };
        let (dm, ds) = col(|s| s.d_tilde);
        let (nm, ns) = col(|s| s.n_sigma);
        let (k1m, k1s) = col(|s| s.k1);
        let (k2m, k2s) = col(|s| s.k2);
        let (qm, qs) = col(|s| s.q);
        w.row(&[
            l.to_string(),
            format_float(dm),
            format_float(ds),
            format_float(nm),
            format_float(ns),
            format_float(k1m),
            format_float(k1s),
            format_float(k2m),
            format_float(k2s),
            format_float(qm),
            format_float(qs),
        ])?;
    }
    w.finish()?;
    Ok(CommandOutcome {
        files: vec![layers_path, summary_path],
    })
}

/// Mean-field moment propagation over disorder instances
/// (layer 0 = exact input covariance).
pub fn cmd_meanfield(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<CommandOutcome> {
    cfg.validate()?;
    let rule = quad_rule()?;
    let net_cfg = cfg.network_config();
    let spec = cfg.input_spec()?;

    let mut per_instance = Vec::with_capacity(cfg.run.instances);
    for i in 0..cfg.run.instances {
        let mut rs_in = RandomSource::with_stream(seed, input_stream(i));
        let sampler = InputSampler::draw_ensemble(&spec, &mut rs_in)?;
        let mut rs_net = RandomSource::with_stream(seed, network_stream(i));
        let net = sample_network(&net_cfg, &mut rs_net)?;

        let input = ActivityMoments::zero_mean(sampler.lambda().clone());
        let mut summaries = vec![layer_summary(&input)?];
        for mom in propagate_moments(&net, &input, &net_cfg, &rule)? {
            summaries.push(layer_summary(&mom)?);
        }
        per_instance.push(summaries);
    }
    write_layer_files(out_dir, "meanfield", &per_instance)
}

/// Monte Carlo sample propagation over disorder instances
/// (layer 0 = sample estimate of the input moments).
pub fn cmd_montecarlo(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<CommandOutcome> {
    cfg.validate()?;
    let net_cfg = cfg.network_config();
    let spec = cfg.input_spec()?;

    let mut per_instance = Vec::with_capacity(cfg.run.instances);
    for i in 0..cfg.run.instances {
        let mut rs_in = RandomSource::with_stream(seed, input_stream(i));
        let sampler = InputSampler::draw_ensemble(&spec, &mut rs_in)?;
        let mut rs_net = RandomSource::with_stream(seed, network_stream(i));
        let net = sample_network(&net_cfg, &mut rs_net)?;

        let mut rs_samp = RandomSource::with_stream(seed, sample_stream(i));
        let moments = propagate_sample_moments(
            &net,
            &net_cfg,
            cfg.run.samples,
            cfg.run.block,
            &mut rs_samp,
            |count, src| Ok(SampleBatch::new(sampler.draw(count, src))),
        )?;
        let summaries = moments
            .iter()
            .map(layer_summary)
            .collect::<Result<Vec<_>>>()?;
        per_instance.push(summaries);
    }
    write_layer_files(out_dir, "montecarlo", &per_instance)
}

/// Large-N scalar recursion from one sampled input covariance.
pub fn cmd_theory(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<CommandOutcome> {
    cfg.validate()?;
    let rule = quad_rule()?;
    let theory_cfg = cfg.theory_config();
    let spec = cfg.input_spec()?;
    let mut rs_in = RandomSource::with_stream(seed, input_stream(0));
    let sampler = InputSampler::draw_ensemble(&spec, &mut rs_in)?;
    let init = TheoryState::from_input_covariance(sampler.lambda())?;
    let states = run_theory(&theory_cfg, &init, cfg.network.depth, &rule)?;

    let path = out_dir.join("theory_layers.csv");
    let mut w = CsvWriter::create(
        &path,
        &[
            "layer",
            "k1",
            "k2",
            "q",
            "n_sigma",
            "d_tilde",
            "gamma1",
            "gamma2",
            "kappa",
            "additive_term",
        ],
    )?;
    for (l, s) in states.iter().enumerate() {
        let additive = if l == 0 {
            f64::NAN
        } else {
            additive_term(s, states[l - 1].k1, &theory_cfg)
        };
        w.row(&[
            l.to_string(),
            format_float(s.k1),
            format_float(s.k2),
            format_float(s.q),
            format_float(s.n_sigma),
            format_float(s.d_tilde),
            format_float(s.gamma1),
            format_float(s.gamma2),
            format_float(s.kappa),
            format_float(additive),
        ])?;
    }
    w.finish()?;
    Ok(CommandOutcome { files: vec![path] })
}

/// The affine correlation-strength map at the input-layer statistics:
/// lines for r = 0 and the configured r (same kappa, so exactly the same
/// slope), plus operating points.
pub fn cmd_sigma_map(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<CommandOutcome> {
    cfg.validate()?;
    let rule = quad_rule()?;
    let theory_cfg = cfg.theory_config();
    let spec = cfg.input_spec()?;
    let mut rs_in = RandomSource::with_stream(seed, input_stream(0));
    let sampler = InputSampler::draw_ensemble(&spec, &mut rs_in)?;
    let init = TheoryState::from_input_covariance(sampler.lambda())?;
    let kappa = k_coefficients(&init, &theory_cfg, &rule)?.kbar_ij_sq;

    let mut r_values = vec![0.0];
    if cfg.network.r > 0.0 {
        r_values.push(cfg.network.r);
    }

    let op_path = out_dir.join("sigma_map_operating.csv");
    let mut ow = CsvWriter::create(
        &op_path,
        &[
            "r",
            "n_sigma_star",
            "upsilon",
            "slope",
            "intercept",
            "kappa",
        ],
    )?;
    let mut stars = Vec::new();
    for &r in &r_values {
        let rcfg = crate::theory::TheoryConfig {
            corr_r: r,
            ..theory_cfg
        };
        let star = operating_point(&init, &rcfg, kappa)?;
        stars.push(star);
        let zero_state = TheoryState {
            n_sigma: 0.0,
            ..init
        };
        let intercept = sigma_step(&zero_state, &rcfg, kappa);
        let one_state = TheoryState {
            n_sigma: 1.0,
            ..init
        };
        let slope = sigma_step(&one_state, &rcfg, kappa) - intercept;
        ow.row(&[
            format_float(r),
            format_float(star),
            format_float(cfg.network.g.powi(4) * kappa),
            format_float(slope),
            format_float(intercept),
            format_float(kappa),
        ])?;
    }
    ow.finish()?;

    let max_star = stars.iter().cloned().fold(init.n_sigma, f64::max);
    let hi = 2.0 * max_star.max(1e-6);
    let points = cfg.theory.map_points.max(2);
    let map_path = out_dir.join("sigma_map.csv");
    let mut mw = CsvWriter::create(&map_path, &["r", "n_sigma_in", "n_sigma_out"])?;
    for &r in &r_values {
        let rcfg = crate::theory::TheoryConfig {
            corr_r: r,
            ..theory_cfg
        };
        for p in 0..points {
            let x = hi * p as f64 / (points - 1) as f64;
            let state = TheoryState { n_sigma: x, ..init };
            let y = sigma_step(&state, &rcfg, kappa);
            mw.row(&[format_float(r), format_float(x), format_float(y)])?;
        }
    }
    mw.finish()?;
    Ok(CommandOutcome {
        files: vec![map_path, op_path],
    })
}

/// Eigenvalue histogram of one input covariance against the annealed law.
pub fn cmd_spectrum(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<CommandOutcome> {
    cfg.validate()?;
    let spec = cfg.input_spec_at(cfg.spectrum.n)?;
    let mut rs_in = RandomSource::with_stream(seed, input_stream(0));
    let sampler = InputSampler::draw_ensemble(&spec, &mut rs_in)?;
    let report = spectrum_report(
        sampler.lambda(),
        cfg.input.alpha,
        cfg.input.sigma,
        cfg.spectrum.bins,
    )?;

    let hist_path = out_dir.join("spectrum_hist.csv");
    let mut hw = CsvWriter::create(
        &hist_path,
        &["bin_center", "empirical_density", "theory_density"],
    )?;
    for b in 0..report.densities.len() {
        let center = 0.5 * (report.bin_edges[b] + report.bin_edges[b + 1]);
        hw.row(&[
            format_float(center),
            format_float(report.densities[b]),
            format_float(report.theory_density[b]),
        ])?;
    }
    hw.finish()?;

    let eig_path = out_dir.join("spectrum_eigenvalues.csv");
    let mut ew = CsvWriter::create(&eig_path, &["index", "eigenvalue"])?;
    for (i, ev) in report.eigenvalues.iter().enumerate() {
        ew.row(&[i.to_string(), format_float(*ev)])?;
    }
    ew.finish()?;

    let (_, d_tilde_emp) = participation_ratio(sampler.lambda())?;
    let summary_path = out_dir.join("spectrum_summary.csv");
    let mut sw = CsvWriter::create(
        &summary_path,
        &[
            "l1_distance",
            "support_lo",
            "support_hi",
            "min_eigenvalue",
            "max_eigenvalue",
            "d_tilde_empirical",
            "d_tilde_theory",
        ],
    )?;
    sw.row(&[
        format_float(report.l1_distance),
        format_float(report.support.0),
        format_float(report.support.1),
        format_float(*report.eigenvalues.last().unwrap()),
        format_float(report.eigenvalues[0]),
        format_float(d_tilde_emp),
        format_float(mp_normalized_dim(cfg.input.alpha)?),
    ])?;
    sw.finish()?;
    Ok(CommandOutcome {
        files: vec![hist_path, eig_path, summary_path],
    })
}

/// Regularized Hebbian training over independent realizations.
pub fn cmd_hebbian(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<CommandOutcome> {
    cfg.validate()?;
    let heb_cfg = cfg.hebbian_config();
    let spec = cfg.input_spec_at(cfg.hebbian.n)?;
    let mut rs = RandomSource::with_stream(seed, 4u64 << 32);
    let per_realization =
        crate::hebbian::run_hebbian(&heb_cfg, &spec, cfg.hebbian.realizations, &mut rs)?;
    write_layer_files(out_dir, "hebbian", &per_realization)
}
