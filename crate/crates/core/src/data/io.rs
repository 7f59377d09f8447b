//! JSON Lines persistence for visits and trajectories.
//!
//! One record per line, schema version `"v": 1`. Signals are either nested
//! arrays (`hours x channels x samples`) or a reference into a little-endian
//! `f32` blob: `{"path": "signals.bin", "offset": <bytes>, "shape": [h, c, p]}`
//! with `path` relative to the JSONL file.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Trajectory, VisitLabels, VisitRecord};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// How signals are written.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SignalStorage {
    Inline,
    /// Blob file name, created next to the JSONL file.
    Blob(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    path: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SignalsField {
    Inline(Vec<Vec<Vec<f32>>>),
    Blob(BlobRef),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisitLine {
    v: u32,
    patient_id: String,
    hours: Vec<i64>,
    #[serde(rename = "static")]
    static_values: Vec<Vec<Option<f64>>>,
    structured: Vec<Vec<Option<f64>>>,
    sample_rate: f64,
    signals: SignalsField,
    signal_missing: Vec<bool>,
    labels: VisitLabels,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLabels {
    label: Option<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLine {
    v: u32,
    patient_id: String,
    block_id: Option<String>,
    hours: Vec<i64>,
    #[serde(rename = "static")]
    static_values: Vec<f64>,
    structured: Vec<Vec<f64>>,
    sample_rate: f64,
    signals: SignalsField,
    signal_missing: Vec<bool>,
    labels: TrajectoryLabels,
}

struct BlobWriter {
    name: String,
    out: BufWriter<File>,
    offset: u64,
}

impl BlobWriter {
    fn append(&mut self, segs: &[Arc<[f32]>], c: usize, p: usize) -> Result<SignalsField> {
        let start = self.offset;
        for s in segs {
            for x in s.iter() {
                self.out.write_all(&x.to_le_bytes())?;
            }
            self.offset += 4 * s.len() as u64;
        }
        Ok(SignalsField::Blob(BlobRef {
            path: self.name.clone(),
            offset: start,
            shape: vec![segs.len(), c, p],
        }))
    }
}

fn open_blob(path: &Path, storage: &SignalStorage) -> Result<Option<BlobWriter>> {
    match storage {
        SignalStorage::Inline => Ok(None),
        SignalStorage::Blob(name) => {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            Ok(Some(BlobWriter {
                name: name.clone(),
                out: BufWriter::new(File::create(dir.join(name))?),
                offset: 0,
            }))
        }
    }
}

fn inline(segs: &[Arc<[f32]>], c: usize, p: usize) -> SignalsField {
    SignalsField::Inline(
        segs.iter()
            .map(|s| (0..c).map(|ch| s[ch * p..(ch + 1) * p].to_vec()).collect())
            .collect(),
    )
}

fn encode_signals(blob: &mut Option<BlobWriter>, segs: &[Arc<[f32]>], c: usize, p: usize) -> Result<SignalsField> {
    match blob {
        Some(b) => b.append(segs, c, p),
        None => Ok(inline(segs, c, p)),
    }
}

/// Resolves signal fields, caching blob files by path.
struct SignalReader {
    dir: PathBuf,
    blobs: HashMap<String, Arc<Vec<u8>>>,
}

impl SignalReader {
    fn new(path: &Path) -> Self {
        Self {
            dir: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
            blobs: HashMap::new(),
        }
    }

    /// Returns per-hour segments and their `(channels, samples)`.
    fn decode(&mut self, field: SignalsField, hours: usize) -> Result<(Vec<Arc<[f32]>>, usize, usize)> {
        match field {
            SignalsField::Inline(rows) => {
                if rows.len() != hours {
                    return Err(Error::Data("signal count differs from hours".into()));
                }
                let c = rows.first().map_or(0, Vec::len);
                let p = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
                let segs = rows
                    .into_iter()
                    .map(|chans| {
                        if chans.len() != c || chans.iter().any(|ch| ch.len() != p) {
                            return Err(Error::Data("ragged signal arrays".into()));
                        }
                        Ok(chans.concat().into())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((segs, c, p))
            }
            SignalsField::Blob(r) => {
                let [h, c, p] = r.shape[..] else {
                    return Err(Error::Data("blob shape must be [hours, channels, samples]".into()));
                };
                if h != hours {
                    return Err(Error::Data("blob hour count differs from hours".into()));
                }
                let bytes = match self.blobs.get(&r.path) {
                    Some(b) => b.clone(),
                    None => {
                        let b = Arc::new(fs::read(self.dir.join(&r.path))?);
                        self.blobs.insert(r.path.clone(), b.clone());
                        b
                    }
                };
                let n = c * p;
                let start = r.offset as usize;
                let end = start + 4 * h * n;
                if end > bytes.len() {
                    return Err(Error::Data(format!("blob {} too short", r.path)));
                }
                let floats: Vec<f32> = bytes[start..end]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                let segs = floats.chunks(n.max(1)).take(h).map(Arc::from).collect();
                Ok((segs, c, p))
            }
        }
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Data(format!("unsupported schema version {v}")));
    }
    Ok(())
}

pub fn write_visits(path: &Path, visits: &[VisitRecord], storage: &SignalStorage) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut blob = open_blob(path, storage)?;
    for v in visits {
        let line = VisitLine {
            v: SCHEMA_VERSION,
            patient_id: v.patient_id.clone(),
            hours: v.hours.clone(),
            static_values: v.static_values.clone(),
            structured: v.structured.clone(),
            sample_rate: v.sample_rate,
            signals: encode_signals(&mut blob, &v.signals, v.signal_channels, v.signal_len)?,
            signal_missing: v.signal_missing.clone(),
            labels: v.labels.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    if let Some(mut b) = blob {
        b.out.flush()?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_visits(path: &Path) -> Result<Vec<VisitRecord>> {
    let file = File::open(path)?;
    let mut signals = SignalReader::new(path);
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VisitLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        check_version(rec.v)?;
        let (segs, c, p) = signals.decode(rec.signals, rec.hours.len())?;
        let visit = VisitRecord {
            patient_id: rec.patient_id,
            hours: rec.hours,
            static_values: rec.static_values,
            structured: rec.structured,
            signals: segs,
            signal_channels: c,
            signal_len: p,
            sample_rate: rec.sample_rate,
            signal_missing: rec.signal_missing,
            labels: rec.labels,
        };
        visit.validate()?;
        out.push(visit);
    }
    Ok(out)
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory], storage: &SignalStorage) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut blob = open_blob(path, storage)?;
    for t in trajectories {
        let m = t.n_structured;
        let line = TrajectoryLine {
            v: SCHEMA_VERSION,
            patient_id: t.patient_id.clone(),
            block_id: t.block_id.clone(),
            hours: t.hour_span().collect(),
            static_values: t.static_features.clone(),
            structured: if m == 0 {
                vec![Vec::new(); t.steps()]
            } else {
                t.structured.chunks(m).map(<[f64]>::to_vec).collect()
            },
            sample_rate: t.sample_rate,
            signals: encode_signals(&mut blob, &t.signals, t.signal_channels, t.signal_len)?,
            signal_missing: t.signal_missing.clone(),
            labels: TrajectoryLabels { label: t.label },
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    if let Some(mut b) = blob {
        b.out.flush()?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path)?;
    let mut signals = SignalReader::new(path);
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        check_version(rec.v)?;
        let steps = rec.hours.len();
        if steps == 0 || rec.signal_missing.len() != steps || rec.structured.len() != steps {
            return Err(Error::Data(format!("trajectory line {} has inconsistent lengths", i + 1)));
        }
        let m = rec.structured[0].len();
        let (segs, c, p) = signals.decode(rec.signals, steps)?;
        out.push(Trajectory {
            patient_id: rec.patient_id,
            block_id: rec.block_id,
            start_hour: rec.hours[0],
            static_features: rec.static_values,
            structured: rec.structured.concat(),
            n_structured: m,
            signals: segs,
            signal_channels: c,
            signal_len: p,
            sample_rate: rec.sample_rate,
            signal_missing: rec.signal_missing,
            label: rec.labels.label,
        });
    }
    Ok(out)
}
