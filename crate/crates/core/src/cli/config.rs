//! Run configuration: one JSON document, defaults for every key, leaf
//! overrides from the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::consistency::SignalSpec;
use crate::digest::digest_of;
use crate::error::{Error, Result};
use crate::gradcheck::{OrderDatasetSpec, TrainOptions, DEFAULT_STEP};
use crate::projector::ProjectorConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    /// Forward pass only.
    Single,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Double => "double",
            Precision::Single => "single",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double" | "f64" => Ok(Precision::Double),
            "single" | "f32" => Ok(Precision::Single),
            _ => Err(Error::Config(format!("unknown precision `{s}` (expected double or single)"))),
        }
    }
}

/// Keys filled from another key after parsing. A file may spell them out,
/// but only with the value they would be given anyway.
const DERIVED: [(&str, &str); 5] = [
    ("projector.seed", "seed"),
    ("signal.seed", "seed"),
    ("dataset.seed", "seed"),
    ("signal.channels", "projector.input_dim"),
    ("dataset.channels", "projector.input_dim"),
];

fn default_frame_counts() -> Vec<usize> {
    vec![8, 16, 32, 64, 128]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub projector: ProjectorConfig,
    /// Frame count for `mask` and `forward`.
    pub n_frames: usize,
    /// Tokens per frame for `forward`.
    pub tokens_per_frame: usize,
    pub signal: SignalSpec,
    pub frame_counts: Vec<usize>,
    pub grid_points: usize,
    /// Frame count every other count is compared with in `consistency`;
    /// the largest of `frame_counts` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_frames: Option<usize>,
    pub dataset: OrderDatasetSpec,
    pub train: TrainOptions,
    pub fd_step: f64,
    /// Not part of the digest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            precision: Precision::Double,
            projector: ProjectorConfig::default(),
            n_frames: 8,
            tokens_per_frame: 4,
            signal: SignalSpec::default(),
            frame_counts: default_frame_counts(),
            grid_points: crate::consistency::DEFAULT_GRID_POINTS,
            reference_frames: None,
            dataset: OrderDatasetSpec::default(),
            train: TrainOptions::default(),
            fd_step: DEFAULT_STEP,
            output_dir: None,
        };
        cfg.sync_derived();
        cfg
    }
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |node, key| node.get(key))
}

impl ExperimentConfig {
    /// Parses a JSON document. Errors carry the serde message, which names
    /// the key and its line.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync_derived();
        let resolved = serde_json::to_value(&cfg).expect("config serializes");
        for (key, source) in DERIVED {
            if let Some(given) = lookup(&raw, key) {
                let expected = lookup(&resolved, key).expect("derived key present");
                if given != expected {
                    return Err(Error::Config(format!(
                        "{key} is taken from {source}; found {given}, expected {expected}"
                    )));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Sets leaf keys given as dotted paths; values are JSON literals, or
    /// plain strings when they do not parse as JSON.
    pub fn apply_overrides(&mut self, overrides: &[(String, Value)]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut v = serde_json::to_value(&*self).expect("config serializes");
        for (path, value) in overrides {
            if let Some((key, source)) = DERIVED.iter().find(|(k, _)| k == path) {
                return Err(Error::Config(format!("{key} is taken from {source}; set {source} instead")));
            }
            let mut node = &mut v;
            let mut parts = path.split('.').peekable();
            while let Some(part) = parts.next() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("{path}: `{part}` is not inside a section")))?;
                if parts.peek().is_none() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("{path}: unknown section `{part}`")))?;
            }
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| {
            let keys: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
            Error::Config(format!("override {}: {e}", keys.join(", ")))
        })?;
        cfg.sync_derived();
        *self = cfg;
        Ok(())
    }

    fn sync_derived(&mut self) {
        self.projector.seed = self.seed;
        self.signal.seed = self.seed;
        self.dataset.seed = self.seed;
        self.signal.channels = self.projector.input_dim;
        self.dataset.channels = self.projector.input_dim;
    }

    /// Checks shared by every subcommand.
    pub fn validate(&self) -> Result<()> {
        self.projector.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("projector: {m}")),
            other => other,
        })?;
        if self.n_frames == 0 {
            return Err(Error::Config("n_frames must be at least 1".into()));
        }
        if self.tokens_per_frame == 0 {
            return Err(Error::Config("tokens_per_frame must be at least 1".into()));
        }
        if self.frame_counts.is_empty() || self.frame_counts[0] == 0 || self.frame_counts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("frame_counts must be positive and strictly increasing".into()));
        }
        if self.reference_frames == Some(0) {
            return Err(Error::Config("reference_frames must be at least 1".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::Config("fd_step must be positive".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form, output location excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        digest_of(&c)
    }
}

/// Reads, parses and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_json_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{arg}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}
