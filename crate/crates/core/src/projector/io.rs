//! Flat binary parameter files plus a JSON manifest.
//!
//! Binary layout, all integers `u64` little-endian:
//!
//! ```text
//! section_count
//! repeated section_count times:
//!     name_len, name bytes (UTF-8),
//!     rank, dims[rank],
//!     prod(dims) f64 values, little-endian, row-major
//! ```
//!
//! Row-vector sections (`1 x n`) are written with rank 1.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

use super::config::ProjectorConfig;
use super::params::{ProjectorParams, SECTION_NAMES};

pub const PARAMS_FORMAT: &str = "ccam-params-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsManifest {
    pub format: String,
    pub seed: u64,
    pub config: ProjectorConfig,
    pub sections: Vec<SectionInfo>,
    /// Digest of the run configuration that produced the file, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

fn dims_of(m: &Matrix<f64>) -> Vec<usize> {
    if m.rows() == 1 {
        vec![m.cols()]
    } else {
        vec![m.rows(), m.cols()]
    }
}

pub fn manifest(params: &ProjectorParams<f64>) -> ParamsManifest {
    ParamsManifest {
        format: PARAMS_FORMAT.to_string(),
        seed: params.config.seed,
        config: params.config.clone(),
        sections: params
            .sections()
            .iter()
            .map(|(name, m)| SectionInfo {
                name: name.to_string(),
                shape: dims_of(m),
            })
            .collect(),
        config_digest: None,
    }
}

pub fn encode_params(params: &ProjectorParams<f64>) -> Vec<u8> {
    let sections = params.sections();
    let mut out = Vec::with_capacity(8 + params.n_scalars() * 8 + sections.len() * 64);
    out.extend_from_slice(&(sections.len() as u64).to_le_bytes());
    for (name, m) in sections.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = dims_of(m);
        out.extend_from_slice(&(dims.len() as u64).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated params file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Decodes a params blob for `config`. Every expected section must appear
/// exactly once with the expected shape; order is free.
pub fn decode_params(bytes: &[u8], config: &ProjectorConfig) -> Result<ProjectorParams<f64>> {
    config.validate()?;
    let mut params = ProjectorParams::zeros(config);
    let mut seen = [false; SECTION_NAMES.len()];
    let mut r = Reader { bytes, pos: 0 };
    let count = r.usize()?;
    for _ in 0..count {
        let name_len = r.usize()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?
            .to_string();
        let rank = r.usize()?;
        if !(1..=2).contains(&rank) {
            return Err(Error::Format(format!("section `{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let idx = SECTION_NAMES
            .iter()
            .position(|&n| n == name)
            .ok_or_else(|| Error::Format(format!("unknown section `{name}`")))?;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::Format(format!("duplicate section `{name}`")));
        }
        let mut sections = params.sections_mut();
        let target = &mut sections[idx].1;
        if target.shape() != (rows, cols) {
            return Err(Error::Format(format!(
                "section `{name}` is {rows}x{cols}, config expects {}",
                target.shape_str()
            )));
        }
        for v in target.data_mut().iter_mut() {
            *v = r.f64()?;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("missing section `{}`", SECTION_NAMES[i])));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last section".into()));
    }
    params.check()?;
    Ok(params)
}

/// Writes the binary blob to `bin_path` and the manifest to `manifest_path`.
pub fn write_params(params: &ProjectorParams<f64>, bin_path: &Path, manifest_path: &Path) -> Result<()> {
    fs::write(bin_path, encode_params(params))?;
    let json = serde_json::to_string_pretty(&manifest(params)).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(manifest_path, json + "\n")?;
    Ok(())
}

pub fn read_params(bin_path: &Path, manifest_path: &Path) -> Result<ProjectorParams<f64>> {
    let text = fs::read_to_string(manifest_path)?;
    let m: ParamsManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.format != PARAMS_FORMAT {
        return Err(Error::Format(format!("unsupported params format `{}`", m.format)));
    }
    decode_params(&fs::read(bin_path)?, &m.config)
}
