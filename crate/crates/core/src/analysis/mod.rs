//! Population studies on fitted and raw driving data: behaviour diversity
//! histograms, the per-driver parameter distribution against a refit noise
//! band, and the trajectory-half consistency experiment.

pub mod consistency;
pub mod diversity;
pub mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::CalibError;

pub use consistency::{consistency_experiment, ConsistencyOptions, ConsistencyReport};
pub use diversity::{diversity_metrics, DiversityOptions, DiversityReport, ThresholdMode};
pub use params::{param_distribution, ParamDistributionReport};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("no per-driver fits")]
    NoFits,
    #[error("invalid buckets: {0}")]
    InvalidBuckets(String),
    #[error("invalid analysis options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Calib(#[from] CalibError),
}

/// Fixed-width histogram. `edges` has one more entry than `counts`; the last
/// bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bin `values` into `bins` equal bins over `range`, or over the data
    /// range when `range` is `None`. Values outside an explicit range are
    /// clamped into the edge bins.
    pub fn from_values(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Self {
        let bins = bins.max(1);
        let (mut lo, mut hi) = range.unwrap_or_else(|| {
            values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)))
        });
        if !lo.is_finite() || !hi.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi <= lo {
            (lo, hi) = (lo - 0.5, lo + 0.5);
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = ((v - lo) / width).floor();
            let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(bins - 1) };
            counts[k] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Bin indices of local maxima. A plateau counts once, at its centre.
    pub fn peaks(&self) -> Vec<usize> {
        let c = &self.counts;
        let mut runs: Vec<(usize, usize, usize)> = Vec::new();
        for (i, &v) in c.iter().enumerate() {
            match runs.last_mut() {
                Some(r) if r.2 == v => r.1 = i,
                _ => runs.push((i, i, v)),
            }
        }
        (0..runs.len())
            .filter(|&k| {
                let v = runs[k].2;
                v > 0 && (k == 0 || runs[k - 1].2 < v) && (k + 1 == runs.len() || runs[k + 1].2 < v)
            })
            .map(|k| (runs[k].0 + runs[k].1) / 2)
            .collect()
    }

    /// Whether two local maxima lie at least `min_separation` bins apart
    /// with the lowest bin between them at most half the smaller peak.
    pub fn has_separated_peaks(&self, min_separation: usize) -> bool {
        let p = self.peaks();
        p.iter().enumerate().any(|(k, &i)| {
            p[k + 1..].iter().any(|&j| {
                let valley = self.counts[i..=j].iter().copied().min().unwrap_or(0);
                j - i >= min_separation && 2 * valley <= self.counts[i].min(self.counts[j])
            })
        })
    }
}
