use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Decimal float with 17 significant digits; round-trips f64 exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Row-oriented CSV writer with a fixed header.
pub struct CsvWriter {
    out: BufWriter<File>,
    columns: usize,
    path: PathBuf,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self {
            out,
            columns: header.len(),
            path: path.to_path_buf(),
        })
    }

    /// Writes one row of already-formatted fields.
    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        debug_assert_eq!(fields.len(), self.columns, "{}", self.path.display());
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// JSON run manifest: config snapshot, seed, command, start time, wall
/// seconds.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &crate::cli::ExperimentConfig,
    seed: u64,
    started: &str,
    elapsed_s: f64,
) -> Result<()> {
    let manifest = serde_json::json!({
        "config": config,
        "seed": seed,
        "command": command,
        "started": started,
        "elapsed_s": elapsed_s,
    });
    let path = dir.join("manifest.json");
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Mean and standard error over instances (stderr 0 for one instance).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
