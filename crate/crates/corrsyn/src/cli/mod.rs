//! Reproducible experiment commands: every pipeline is a pure function of
//! (config, seed) writing plot-ready CSVs plus a JSON run manifest.

mod commands;
mod config;
mod output;

pub use commands::{
    cmd_hebbian, cmd_meanfield, cmd_montecarlo, cmd_sigma_map, cmd_spectrum, cmd_theory,
    CommandOutcome,
};
pub use config::{
    ExperimentConfig, HebbianSection, InputSection, NetworkSection, RunSection, SpectrumSection,
    TheorySection,
};
pub use output::{format_float, write_manifest, CsvWriter};
