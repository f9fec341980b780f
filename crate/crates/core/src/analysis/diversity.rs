//! Per-driver acceleration, deceleration and minimum time headway.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Histogram;
use crate::stats;
use crate::trajdata::FollowEpisode;

/// How the speed-change threshold is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Velocity change between consecutive frames.
    PerFrame,
    /// Velocity change over a one-second window.
    PerSecond,
}

impl ThresholdMode {
    pub const ALL: [ThresholdMode; 2] = [ThresholdMode::PerFrame, ThresholdMode::PerSecond];

    pub fn as_str(&self) -> &'static str {
        match self {
            ThresholdMode::PerFrame => "per_frame",
            ThresholdMode::PerSecond => "per_second",
        }
    }

    fn window(&self, dt: f64) -> usize {
        match self {
            ThresholdMode::PerFrame => 1,
            ThresholdMode::PerSecond => ((1.0 / dt).round() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityOptions {
    /// Minimum speed change (m/s) over the mode's window.
    pub accel_threshold: f64,
    /// Drivers whose minimum headway exceeds this (s) are excluded.
    pub headway_cap: f64,
    /// Frames slower than this (m/s) are skipped for headway.
    pub min_speed: f64,
    pub bins: usize,
}

impl Default for DiversityOptions {
    fn default() -> Self {
        DiversityOptions {
            accel_threshold: 2.0,
            headway_cap: 5.0,
            min_speed: 0.1,
            bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub unit: String,
    /// Value per contributing driver.
    pub per_driver: BTreeMap<i64, f64>,
    pub total_drivers: usize,
    pub excluded_drivers: usize,
    pub inclusion_fraction: f64,
    pub histogram: Histogram,
}

impl MetricReport {
    fn new(name: &str, unit: &str, per_driver: BTreeMap<i64, f64>, total: usize, bins: usize, range: Option<(f64, f64)>) -> Self {
        let values: Vec<f64> = per_driver.values().copied().collect();
        MetricReport {
            name: name.into(),
            unit: unit.into(),
            total_drivers: total,
            excluded_drivers: total - per_driver.len(),
            inclusion_fraction: if total > 0 { per_driver.len() as f64 / total as f64 } else { 0.0 },
            histogram: Histogram::from_values(&values, bins, range),
            per_driver,
        }
    }

    pub fn summary(&self) -> stats::Summary {
        stats::Summary::of(&self.per_driver.values().copied().collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mode: ThresholdMode,
    pub accel_threshold: f64,
    pub acceleration: MetricReport,
    pub deceleration: MetricReport,
    pub min_headway: MetricReport,
}

impl DiversityReport {
    pub fn metrics(&self) -> [&MetricReport; 3] {
        [&self.acceleration, &self.deceleration, &self.min_headway]
    }
}

/// Mean rate (m/s²) of the windows whose speed change reaches the threshold,
/// with deceleration reported as a positive magnitude.
fn mean_rates(episodes: &[FollowEpisode], mode: ThresholdMode, threshold: f64) -> (Option<f64>, Option<f64>) {
    let mut acc = Vec::new();
    let mut dec = Vec::new();
    for ep in episodes {
        let w = mode.window(ep.dt);
        let span = w as f64 * ep.dt;
        for t in 0..ep.len().saturating_sub(w) {
            let dv = ep.ego_velocity[t + w] - ep.ego_velocity[t];
            if dv >= threshold {
                acc.push(dv / span);
            } else if -dv >= threshold {
                dec.push(-dv / span);
            }
        }
    }
    let m = |v: &[f64]| (!v.is_empty()).then(|| stats::mean(v));
    (m(&acc), m(&dec))
}

fn min_headway(episodes: &[FollowEpisode], min_speed: f64) -> Option<f64> {
    episodes
        .iter()
        .flat_map(|ep| ep.ego_velocity.iter().zip(&ep.gap))
        .filter(|(v, _)| **v >= min_speed)
        .map(|(v, g)| g / v)
        .min_by(f64::total_cmp)
}

pub fn diversity_metrics(
    groups: &BTreeMap<i64, Vec<FollowEpisode>>,
    mode: ThresholdMode,
    options: &DiversityOptions,
) -> DiversityReport {
    let mut acc = BTreeMap::new();
    let mut dec = BTreeMap::new();
    let mut headway = BTreeMap::new();
    for (&id, eps) in groups {
        let (a, d) = mean_rates(eps, mode, options.accel_threshold);
        if let Some(a) = a {
            acc.insert(id, a);
        }
        if let Some(d) = d {
            dec.insert(id, d);
        }
        if let Some(h) = min_headway(eps, options.min_speed).filter(|h| *h <= options.headway_cap) {
            headway.insert(id, h);
        }
    }
    let n = groups.len();
    let bins = options.bins;
    DiversityReport {
        mode,
        accel_threshold: options.accel_threshold,
        acceleration: MetricReport::new("acceleration", "m/s^2", acc, n, bins, None),
        deceleration: MetricReport::new("deceleration", "m/s^2", dec, n, bins, None),
        min_headway: MetricReport::new("min_headway", "s", headway, n, bins, Some((0.0, options.headway_cap))),
    }
}
