//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic, a little-endian `u64` manifest length, the
//! manifest (one `name d1 d2 …` line per array), the payload of every array
//! as little-endian `f64` in manifest order, then a `u64` length and the
//! metadata as TOML `key = value` text.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCDSRF01";

/// Everything besides the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Per-channel z-score mean and std the model was trained under.
    #[serde(default)]
    pub normalizer_mean: Vec<f64>,
    #[serde(default)]
    pub normalizer_std: Vec<f64>,
    /// Optimizer steps taken; moment arrays are stored as `adam.m.<name>`
    /// and `adam.v.<name>`.
    #[serde(default)]
    pub adam_step: u64,
    /// Train/val/test fractions the model was trained with.
    #[serde(default)]
    pub split: Option<[f64; 3]>,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arrays: IndexMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            arrays: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            meta: CheckpointMeta {
                normalizer_mean: Vec::new(),
                normalizer_std: Vec::new(),
                adam_step: 0,
                split: None,
                model: model.config.clone(),
            },
        }
    }

    /// Rebuild the model described by the metadata and load its parameters.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.meta.model.clone())?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copy parameters into an existing model; every parameter must be
    /// present with the same shape.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = self
                .arrays
                .get(&name)
                .ok_or_else(|| format_err(format!("checkpoint lacks parameter {name}")))?;
            let dst = model.store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(format_err(format!(
                    "parameter {name}: model expects shape {:?}, checkpoint has {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        if let Some(extra) = self
            .arrays
            .keys()
            .find(|k| !k.starts_with("adam.") && model.store.id_of(k).is_none())
        {
            return Err(format_err(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        for (name, t) in &self.arrays {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(format_err(format!("array name {name:?} cannot be stored")));
            }
            manifest.push_str(name);
            for d in t.shape() {
                manifest.push(' ');
                manifest.push_str(&d.to_string());
            }
            manifest.push('\n');
        }
        let meta = toml::to_string(&self.meta).map_err(|e| format_err(e.to_string()))?;
        let payload: usize = self.arrays.values().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(32 + manifest.len() + payload * 8 + meta.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(format_err("not a checkpoint file (bad magic)"));
        }
        let mlen = r.u64("manifest length")? as usize;
        let manifest = std::str::from_utf8(r.take(mlen, "manifest")?)
            .map_err(|_| format_err("manifest is not UTF-8"))?;
        let mut arrays = IndexMap::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let mut parts = line.split(' ');
            let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| {
                format_err(format!("manifest line {} is empty", lineno + 1))
            })?;
            let shape = parts
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| format_err(format!("bad shape for {name} in manifest line {}", lineno + 1)))?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 8, name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| format_err(format!("{name}: {e}")))?;
            if arrays.insert(name.to_string(), t).is_some() {
                return Err(format_err(format!("duplicate array {name}")));
            }
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| format_err("metadata is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes after metadata", bytes.len() - r.pos)));
        }
        let meta: CheckpointMeta = toml::from_str(meta).map_err(|e| format_err(format!("metadata: {e}")))?;
        Ok(Checkpoint { arrays, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("file truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
