use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VisitRecord;
use crate::error::{Error, Result};

/// Partition distinct patient ids by `ratios` after a seeded shuffle.
///
/// Counts use largest-remainder rounding so they always sum to the number
/// of patients.
pub fn split_patients(visits: &[VisitRecord], ratios: &[f64], seed: u64) -> Result<Vec<BTreeSet<String>>> {
    let ids: BTreeSet<&str> = visits.iter().map(|v| v.patient_id.as_str()).collect();
    split_ids(ids, ratios, seed)
}

fn split_ids(ids: BTreeSet<&str>, ratios: &[f64], seed: u64) -> Result<Vec<BTreeSet<String>>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Config("split ratios must lie in [0, 1]".into()));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split ratios must sum to 1".into()));
    }
    let n = ids.len();
    if n < ratios.len() {
        return Err(Error::Data(format!("{n} patients cannot fill {} partitions", ratios.len())));
    }
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }

    let mut out = Vec::with_capacity(counts.len());
    let mut it = ids.into_iter();
    for c in counts {
        out.push(it.by_ref().take(c).map(str::to_owned).collect());
    }
    Ok(out)
}

/// Patient-level train / validation / test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl DatasetSplit {
    /// 80/20 development/test, then 20% of development held out for validation.
    pub fn standard(visits: &[VisitRecord], seed: u64) -> Result<Self> {
        Self::with_ratios(visits, 0.2, 0.2, seed)
    }

    pub fn with_ratios(visits: &[VisitRecord], test_frac: f64, val_frac: f64, seed: u64) -> Result<Self> {
        let parts = split_patients(visits, &[1.0 - test_frac, test_frac], seed)?;
        let (dev, test) = (parts[0].clone(), parts[1].clone());
        let dev_ids = dev.iter().map(String::as_str).collect();
        let inner = split_ids(dev_ids, &[1.0 - val_frac, val_frac], seed.wrapping_add(1))?;
        Ok(Self {
            train: inner[0].clone(),
            validation: inner[1].clone(),
            test,
        })
    }

    pub fn development(&self) -> BTreeSet<String> {
        self.train.union(&self.validation).cloned().collect()
    }

    /// Visits belonging to `ids`, in input order.
    pub fn select<'a>(visits: &'a [VisitRecord], ids: &BTreeSet<String>) -> Vec<&'a VisitRecord> {
        visits.iter().filter(|v| ids.contains(&v.patient_id)).collect()
    }

    pub fn select_owned(visits: &[VisitRecord], ids: &BTreeSet<String>) -> Vec<VisitRecord> {
        Self::select(visits, ids).into_iter().cloned().collect()
    }
}
