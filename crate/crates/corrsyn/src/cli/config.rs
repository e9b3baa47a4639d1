use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{InputEnsembleSpec, NetworkConfig, WeightKind};
use crate::error::{Error, Result};
use crate::hebbian::{HebbianConfig, InitKind, UpdateOrder};
use crate::theory::TheoryConfig;

/// Network ensemble section; defaults are the headline desk-scale
/// setting (N = 200, d = 4, g = 0.9, sigma_b = 0.1, binary weights).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub n: usize,
    pub depth: usize,
    pub g: f64,
    pub sigma_b: f64,
    pub r: f64,
    pub kind: WeightKind,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            n: 200,
            depth: 4,
            g: 0.9,
            sigma_b: 0.1,
            r: 0.0,
            kind: WeightKind::Binary,
        }
    }
}

/// Input ensemble section (alpha = 2, sigma = 0.5).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSection {
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for InputSection {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            sigma: 0.5,
        }
    }
}

/// Run-control section (10 disorder instances, 1e5 samples).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub instances: usize,
    pub samples: usize,
    /// Block size for streaming sample propagation.
    pub block: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            instances: 10,
            samples: 100_000,
            block: 8192,
        }
    }
}

/// Large-N recursion options.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub small_g_mode: bool,
    pub plain_fourth_moment: bool,
    /// Grid points for the sigma-map command.
    pub map_points: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            small_g_mode: false,
            plain_fourth_moment: false,
            map_points: 41,
        }
    }
}

/// Spectrum command options (desk-scale N = 1000, 50 bins).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub n: usize,
    pub bins: usize,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self { n: 1000, bins: 50 }
    }
}

/// Hebbian training section (N = 100, eta = 1e-4, kappa_c = 0.5,
/// g = 0.5, 1e4 samples, 10 realizations).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HebbianSection {
    pub n: usize,
    pub depth: usize,
    pub eta: f64,
    pub kappa_c: f64,
    pub g: f64,
    pub r: f64,
    pub samples: usize,
    pub eval_samples: usize,
    pub realizations: usize,
    pub init: InitKind,
    pub order: UpdateOrder,
}

impl Default for HebbianSection {
    fn default() -> Self {
        Self {
            n: 100,
            depth: 4,
            eta: 1e-4,
            kappa_c: 0.5,
            g: 0.5,
            r: 0.0,
            samples: 10_000,
            eval_samples: 10_000,
            realizations: 10,
            init: InitKind::Correlated,
            order: UpdateOrder::Simultaneous,
        }
    }
}

/// Full experiment configuration: file sections with CLI `--set`
/// overrides applied on top.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkSection,
    pub input: InputSection,
    pub run: RunSection,
    pub theory: TheorySection,
    pub spectrum: SpectrumSection,
    pub hebbian: HebbianSection,
}

impl ExperimentConfig {
    /// Loads a TOML config file (or the defaults when `path` is `None`)
    /// and applies dotted-path overrides, which win over the file.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse()
                    .map_err(|e| Error::Config(format!("bad TOML in {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fails fast (before any compute) when a field is out of range,
    /// naming the violated constraint.
    pub fn validate(&self) -> Result<()> {
        self.network_config().validate()?;
        self.theory_config().validate()?;
        self.input_spec()?.validate()?;
        if self.run.instances == 0 {
            return Err(Error::Config("run.instances must be positive".into()));
        }
        if self.run.samples < 2 {
            return Err(Error::Config("run.samples must be at least 2".into()));
        }
        if self.spectrum.n == 0 || self.spectrum.bins == 0 {
            return Err(Error::Config(
                "spectrum.n and spectrum.bins must be positive".into(),
            ));
        }
        self.hebbian_config().validate()?;
        Ok(())
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            width: self.network.n,
            depth: self.network.depth,
            gain: self.network.g,
            bias_var: self.network.sigma_b,
            corr_r: self.network.r,
            kind: self.network.kind,
        }
    }

    pub fn theory_config(&self) -> TheoryConfig {
        TheoryConfig {
            width: self.network.n,
            gain: self.network.g,
            bias_var: self.network.sigma_b,
            corr_r: self.network.r,
            kind: self.network.kind,
            small_g_mode: self.theory.small_g_mode,
            plain_fourth_moment: self.theory.plain_fourth_moment,
        }
    }

    /// Input spec at the network width; pattern count is alpha * N
    /// rounded to the nearest integer.
    pub fn input_spec(&self) -> Result<InputEnsembleSpec> {
        self.input_spec_at(self.network.n)
    }

    pub fn input_spec_at(&self, width: usize) -> Result<InputEnsembleSpec> {
        let p = (self.input.alpha * width as f64).round();
        if p < 1.0 {
            return Err(Error::Config(format!(
                "input.alpha = {} gives no patterns at N = {width}",
                self.input.alpha
            )));
        }
        Ok(InputEnsembleSpec {
            width,
            pattern_count: p as usize,
            pattern_std: self.input.sigma,
        })
    }

    pub fn hebbian_config(&self) -> HebbianConfig {
        HebbianConfig {
            width: self.hebbian.n,
            depth: self.hebbian.depth,
            learning_rate: self.hebbian.eta,
            penalty: self.hebbian.kappa_c,
            gain: self.hebbian.g,
            corr_r: self.hebbian.r,
            sample_count: self.hebbian.samples,
            eval_count: self.hebbian.eval_samples,
            init: self.hebbian.init,
            order: self.hebbian.order,
        }
    }
}

/// Applies one `section.key=value` override onto the raw TOML table.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let path = path.trim();
    let raw_value = raw_value.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has empty key")));
    }
    let value = parse_toml_scalar(raw_value);

    let mut parts = path.split('.').peekable();
    let mut current = table;
    loop {
        let part = parts.next().expect("split yields at least one part");
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override path '{path}' crosses a non-table value"))
            })?;
    }
}

fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    toml::Value::String(raw.trim_matches('"').to_string())
}
