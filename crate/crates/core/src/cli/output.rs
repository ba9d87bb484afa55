//! Output directory, CSV and JSON writers, run reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::PRNG_NAME;

use super::config::ExperimentConfig;

pub const OUT_DIR_ENV: &str = "CCAM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "ccam-out";

/// `--out`, then `CCAM_OUT_DIR`, then the config's `output_dir`, then
/// `./ccam-out`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Everything that identifies a run. Data files carry the digest and seed.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub subcommand: &'static str,
    pub config: ExperimentConfig,
    pub digest: String,
    pub out_dir: PathBuf,
    pub started: SystemTime,
}

impl RunContext {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn path(&self, suffix: &str) -> PathBuf {
        self.out_dir.join(format!("{}{suffix}", self.subcommand))
    }
}

#[derive(Serialize)]
pub struct RunReport<'a, P: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub config_digest: &'a str,
    pub seed: u64,
    pub prng: &'static str,
    pub config: &'a ExperimentConfig,
    pub payload: P,
}

/// Timing for a run. Kept out of the data files so those stay
/// byte-identical across repeats.
#[derive(Serialize)]
struct RunMeta<'a> {
    subcommand: &'static str,
    config_digest: &'a str,
    seed: u64,
    started_unix_ms: u128,
    duration_ms: f64,
}

/// Comma-separated, LF-terminated, header first. `seed` and
/// `config_digest` are appended to every row.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write(&self, path: &Path, ctx: &RunContext) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let seed = ctx.seed().to_string();
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(self.header.iter().map(String::as_str).chain(["seed", "config_digest"]))
            .map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(String::as_str).chain([seed.as_str(), ctx.digest.as_str()]))
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        fs::write(path, bytes)?;
        Ok(())
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes `<cmd>.csv`, `<cmd>.json` and `<cmd>.meta.json`; returns the
/// paths of the data files.
pub fn write_outputs<P: Serialize>(ctx: &RunContext, table: &CsvTable, payload: P) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&ctx.out_dir)?;
    let csv_path = ctx.path(".csv");
    table.write(&csv_path, ctx)?;
    let json_path = ctx.path(".json");
    write_json(
        &json_path,
        &RunReport {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: ctx.subcommand,
            config_digest: &ctx.digest,
            seed: ctx.seed(),
            prng: PRNG_NAME,
            config: &ctx.config,
            payload,
        },
    )?;
    let duration = ctx.started.elapsed().unwrap_or(Duration::ZERO);
    write_json(
        &ctx.path(".meta.json"),
        &RunMeta {
            subcommand: ctx.subcommand,
            config_digest: &ctx.digest,
            seed: ctx.seed(),
            started_unix_ms: ctx.started.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
            duration_ms: duration.as_secs_f64() * 1e3,
        },
    )?;
    Ok(vec![csv_path, json_path])
}
