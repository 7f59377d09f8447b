//! Ranking metrics and percentile bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    if scores.is_empty() {
        return Err(Error::Metric("empty evaluation set".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUROC is undefined for a single-class set".into()));
    }
    Ok((pos, neg))
}

/// Indices sorted by score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64], descending: bool) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve from the rank-sum statistic; tied scores count
/// half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut rank_sum = 0.0;
    let mut next_rank = 1.0;
    for g in tie_groups(scores, false) {
        let avg = next_rank + (g.len() as f64 - 1.0) / 2.0;
        rank_sum += avg * g.iter().filter(|&&i| labels[i] == 1).count() as f64;
        next_rank += g.len() as f64;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Average precision: precision at each distinct threshold weighted by the
/// recall gained there.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    for g in tie_groups(scores, true) {
        tp += g.iter().filter(|&&i| labels[i] == 1).count();
        seen += g.len();
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over items resampled with replacement. Resamples
/// that contain a single class are redrawn.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    resamples: usize,
    seed: u64,
    metric: fn(&[f64], &[u8]) -> Result<f64>,
) -> Result<Interval> {
    check(scores, labels)?;
    if resamples == 0 {
        return Err(Error::Metric("bootstrap needs at least one resample".into()));
    }
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(resamples);
    let (mut s, mut l) = (vec![0.0; n], vec![0u8; n]);
    let mut attempts = 0usize;
    while stats.len() < resamples {
        attempts += 1;
        if attempts > 100 * resamples {
            return Err(Error::Metric("bootstrap could not draw two-class resamples".into()));
        }
        for i in 0..n {
            let j = rng.random_range(0..n);
            s[i] = scores[j];
            l[i] = labels[j];
        }
        if let Ok(v) = metric(&s, &l) {
            stats.push(v);
        }
    }
    stats.sort_by(f64::total_cmp);
    Ok(Interval {
        lower: percentile(&stats, 0.025),
        upper: percentile(&stats, 0.975),
    })
}

/// Point estimates and bootstrap intervals for one scored set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub prevalence: f64,
    pub auroc: f64,
    pub auroc_ci: Interval,
    pub auprc: f64,
    pub auprc_ci: Interval,
}

pub fn summarize(scores: &[f64], labels: &[u8], resamples: usize, seed: u64) -> Result<MetricSummary> {
    Ok(MetricSummary {
        n: scores.len(),
        prevalence: labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len().max(1) as f64,
        auroc: auroc(scores, labels)?,
        auroc_ci: bootstrap_ci(scores, labels, resamples, seed, auroc)?,
        auprc: auprc(scores, labels)?,
        auprc_ci: bootstrap_ci(scores, labels, resamples, seed.wrapping_add(1), auprc)?,
    })
}
