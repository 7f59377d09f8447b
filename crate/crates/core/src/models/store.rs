//! Named parameter storage and the binary checkpoint format.
//!
//! A checkpoint is the magic `SMDSSL1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as contiguous little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SMDSSL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Trained by the optimiser.
    Param,
    /// Running statistics, updated outside the optimiser.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor,
}

/// Ordered tensors addressed by [`ParamId`] (insertion index) or name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
    pub seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: EntryKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, kind, value });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entry(id).kind == EntryKind::Param)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    /// Overwrite entries by name from `other`, returning how many were copied.
    /// Shapes must agree for every shared name.
    pub fn copy_matching(&mut self, other: &ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for e in &other.entries {
            if !filter(&e.name) {
                continue;
            }
            if let Some(id) = self.id(&e.name) {
                let dst = self.get_mut(id);
                if dst.shape() != e.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for '{}': {:?} vs {:?}",
                        e.name,
                        dst.shape(),
                        e.value.shape()
                    )));
                }
                *dst = e.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub seed: u64,
    /// Configuration the tensors were built from, echoed verbatim.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

pub fn encode_checkpoint(store: &ParamStore, config: serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = store
        .entries
        .iter()
        .map(|e| {
            let r = TensorRecord {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            };
            offset += 8 * e.value.len() as u64;
            r
        })
        .collect();
    let header = CheckpointHeader {
        format_version: 1,
        seed: store.seed,
        config,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in &store.entries {
        for x in e.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let m = CHECKPOINT_MAGIC.len();
    if bytes.len() < m + 8 || &bytes[..m] != CHECKPOINT_MAGIC {
        return Err(bad("missing SMDSSL1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[m..m + 8].try_into().expect("8 bytes")) as usize;
    let start = m + 8;
    let payload = start
        .checked_add(hlen)
        .filter(|&p| p <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[start..payload])?;
    if header.format_version != 1 {
        return Err(bad("unsupported checkpoint version"));
    }
    let data = &bytes[payload..];
    let mut store = ParamStore::new(header.seed);
    for r in &header.tensors {
        if r.dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype '{}'", r.dtype)));
        }
        let n: usize = r.shape.iter().product();
        let lo = r.offset as usize;
        let hi = lo + 8 * n;
        if hi > data.len() {
            return Err(Error::Checkpoint(format!("payload too short for '{}'", r.name)));
        }
        let vals = data[lo..hi]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(r.name.clone(), r.kind, Tensor::new(r.shape.clone(), vals)?)?;
    }
    Ok((header, store))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(store, config)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    decode_checkpoint(&fs::read(path)?)
}
