use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::VisitRecord;
use crate::error::{Error, Result};

/// Training-split feature statistics used for imputation, augmentation noise
/// scales, and input standardisation. Fitted once on the development split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub static_mean: Vec<f64>,
    pub static_sd: Vec<f64>,
    pub structured_mean: Vec<f64>,
    pub structured_sd: Vec<f64>,
    pub signal_mean: Vec<f64>,
    pub signal_sd: Vec<f64>,
    pub signal_channels: usize,
    pub signal_len: usize,
    pub sample_rate: f64,
}

#[derive(Clone, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean_sd(&self) -> (f64, f64) {
        if self.n == 0.0 {
            return (0.0, 1.0);
        }
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        let sd = var.sqrt();
        (mean, if sd > 1e-8 { sd } else { 1.0 })
    }
}

fn column_moments(rows: impl Iterator<Item = impl AsRef<[Option<f64>]>>, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = vec![Moments::default(); width];
    for row in rows {
        for (acc, v) in m.iter_mut().zip(row.as_ref()) {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                acc.push(v);
            }
        }
    }
    m.iter().map(Moments::mean_sd).unzip()
}

impl DatasetStats {
    /// Fit on the given (development-split) visits.
    pub fn fit(visits: &[&VisitRecord]) -> Result<Self> {
        let first = visits
            .first()
            .ok_or_else(|| Error::Data("cannot fit statistics on zero visits".into()))?;
        let (l, m) = (first.n_static(), first.n_structured());
        let (c, p) = (first.signal_channels, first.signal_len);
        for v in visits {
            if v.n_static() != l || v.n_structured() != m || v.signal_channels != c || v.signal_len != p {
                return Err(Error::Data(format!("visit {} has inconsistent feature widths", v.patient_id)));
            }
        }
        let (static_mean, static_sd) = column_moments(visits.iter().flat_map(|v| v.static_values.iter()), l);
        let (structured_mean, structured_sd) = column_moments(visits.iter().flat_map(|v| v.structured.iter()), m);
        let mut sig = vec![Moments::default(); c];
        for v in visits {
            for (seg, &missing) in v.signals.iter().zip(&v.signal_missing) {
                if missing {
                    continue;
                }
                for (ch, acc) in sig.iter_mut().enumerate() {
                    for &x in &seg[ch * p..(ch + 1) * p] {
                        acc.push(f64::from(x));
                    }
                }
            }
        }
        let (signal_mean, signal_sd) = sig.iter().map(Moments::mean_sd).unzip();
        Ok(Self {
            static_mean,
            static_sd,
            structured_mean,
            structured_sd,
            signal_mean,
            signal_sd,
            signal_channels: c,
            signal_len: p,
            sample_rate: first.sample_rate,
        })
    }

    /// Per-channel z-normalised copy of a visit's signals. Missing segments
    /// stay all-zero.
    pub fn normalize_signals(&self, visit: &VisitRecord) -> VisitRecord {
        let p = self.signal_len;
        let zero: Arc<[f32]> = vec![0.0f32; self.signal_channels * p].into();
        let signals = visit
            .signals
            .iter()
            .zip(&visit.signal_missing)
            .map(|(seg, &missing)| {
                if missing {
                    return zero.clone();
                }
                let mut out = seg.to_vec();
                for ch in 0..self.signal_channels {
                    let (mu, sd) = (self.signal_mean[ch], self.signal_sd[ch]);
                    for x in &mut out[ch * p..(ch + 1) * p] {
                        *x = ((f64::from(*x) - mu) / sd) as f32;
                    }
                }
                out.into()
            })
            .collect();
        VisitRecord {
            signals,
            ..visit.clone()
        }
    }
}
