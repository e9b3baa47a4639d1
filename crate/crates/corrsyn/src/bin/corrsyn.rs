use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use corrsyn::cli::{
    cmd_hebbian, cmd_meanfield, cmd_montecarlo, cmd_sigma_map, cmd_spectrum, cmd_theory,
    write_manifest, ExperimentConfig,
};
use corrsyn::Error;

/// Correlated-synapse network experiments: reproducible CSV outputs from
/// a config file, a seed, and an output directory.
#[derive(Parser)]
#[command(name = "corrsyn", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config field, e.g. --set network.g=0.4 (repeatable;
    /// wins over the file).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// RNG seed; every output is a pure function of (config, seed).
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Mean-field moment propagation over disorder instances.
    Meanfield,
    /// Monte Carlo sample propagation over disorder instances.
    Montecarlo,
    /// Closed-form large-N recursion.
    Theory,
    /// Affine correlation-strength map and operating points.
    SigmaMap,
    /// Input-covariance eigenvalue histogram vs the annealed law.
    Spectrum,
    /// Regularized Hebbian training.
    Hebbian,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Meanfield => "meanfield",
            Command::Montecarlo => "montecarlo",
            Command::Theory => "theory",
            Command::SigmaMap => "sigma-map",
            Command::Spectrum => "spectrum",
            Command::Hebbian => "hebbian",
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("corrsyn {}: {err}", args.command.name());
            match err {
                Error::Config(_) | Error::Scaling(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn run(args: &Args) -> Result<(), Error> {
    let config = ExperimentConfig::load(args.config.as_deref(), &args.set)?;
    std::fs::create_dir_all(&args.out)?;
    let started = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    let outcome = match args.command {
        Command::Meanfield => cmd_meanfield(&config, args.seed, &args.out)?,
        Command::Montecarlo => cmd_montecarlo(&config, args.seed, &args.out)?,
        Command::Theory => cmd_theory(&config, args.seed, &args.out)?,
        Command::SigmaMap => cmd_sigma_map(&config, args.seed, &args.out)?,
        Command::Spectrum => cmd_spectrum(&config, args.seed, &args.out)?,
        Command::Hebbian => cmd_hebbian(&config, args.seed, &args.out)?,
    };
    let elapsed = clock.elapsed().as_secs_f64();
    write_manifest(
        &args.out,
        args.command.name(),
        &config,
        args.seed,
        &started,
        elapsed,
    )?;
    for file in &outcome.files {
        println!("wrote {}", file.display());
    }
    Ok(())
}
