//! Single-file model checkpoints plus a human-readable config sidecar.
//!
//! Binary layout (little endian): `FCKP`, version `u32`, parameter count
//! `u32`, then per parameter: name length `u32`, UTF-8 name, rank `u32`,
//! dims `u32 * rank`, float32 data. The sidecar `<file>.toml` carries the
//! model architecture, schedule and encoder mode.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::latent::EncoderMode;
use super::model::{DenoiserModel, ModelConfig};
use super::schedule::ScheduleConfig;
use super::tensor::Mat;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub encoder: EncoderMode,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn encode_params(model: &DenoiserModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, m) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Mat>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(path, "truncated checkpoint"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());

    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let rank = u32_at(take(4)?) as usize;
        let dims = (0..rank)
            .map(|_| take(4).map(|s| u32_at(s) as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::format(path, format!("parameter {name} has rank {rank}"))),
        };
        let data = take(rows * cols * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if params.insert(name.clone(), Mat::from_vec(rows, cols, data)).is_some() {
            return Err(Error::DuplicateId(name));
        }
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    Ok(params)
}

/// Writes `path` and its `.toml` sidecar. Parameters are stored as float32.
pub fn save_checkpoint(path: &Path, model: &DenoiserModel, meta: &CheckpointMeta) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_params(model)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = toml::to_string(meta).map_err(|e| Error::format(&side, e.to_string()))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, CheckpointMeta)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_params(&bytes, path)?;
    Ok((DenoiserModel::from_params(meta.model.clone(), params)?, meta))
}
