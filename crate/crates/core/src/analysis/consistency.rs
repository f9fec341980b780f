//! Trajectory-half consistency: fit the first and second half of each
//! driver's pooled data and compare the parameter distance against refit
//! noise and against halves from different drivers.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::calib::EpisodeFitter;
use crate::idm::{param_distance, IdmParams};
use crate::seed::{derive_seed, rng_from};
use crate::stats::{self, Summary, WelchTest};
use crate::trajdata::{FollowEpisode, DEFAULT_MIN_LENGTH};

const HALF_STREAM: u64 = 0x6861_6c66;
const PAIR_STREAM: u64 = 0x7061_6972;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyOptions {
    /// Half-open `[lo, hi)` ranges of pooled frames per driver.
    pub buckets: Vec<[usize; 2]>,
    /// Drivers need at least twice this many frames.
    pub min_fit_length: usize,
    /// Cross-driver pairs drawn per bucket.
    pub cross_pairs: usize,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        ConsistencyOptions {
            buckets: vec![[100, 300], [300, 1000], [1000, 1_000_000]],
            min_fit_length: DEFAULT_MIN_LENGTH,
            cross_pairs: 1000,
        }
    }
}

impl ConsistencyOptions {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.buckets.is_empty() {
            return Err(AnalysisError::InvalidBuckets("no buckets".into()));
        }
        let mut sorted = self.buckets.clone();
        sorted.sort();
        for b in &sorted {
            if b[0] >= b[1] {
                return Err(AnalysisError::InvalidBuckets(format!("empty range {b:?}")));
            }
        }
        for w in sorted.windows(2) {
            if w[1][0] < w[0][1] {
                return Err(AnalysisError::InvalidBuckets(format!("{:?} overlaps {:?}", w[0], w[1])));
            }
        }
        if self.min_fit_length < 2 {
            return Err(AnalysisError::InvalidOptions("min_fit_length must be at least 2".into()));
        }
        if self.cross_pairs == 0 {
            return Err(AnalysisError::InvalidOptions("cross_pairs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverHalves {
    pub driver_id: i64,
    pub frames: usize,
    pub first: IdmParams,
    pub second: IdmParams,
    /// First half fitted again with another seed.
    pub first_refit: IdmParams,
    pub same_distance: f64,
    pub refit_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSet {
    pub raw: Summary,
    /// Coordinates scaled by search-range width.
    pub normalized: Summary,
}

impl DistanceSet {
    fn of(raw: &[f64], normalized: &[f64]) -> Self {
        DistanceSet {
            raw: Summary::of(raw),
            normalized: Summary::of(normalized),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub range: [usize; 2],
    pub driver_ids: Vec<i64>,
    pub refit: DistanceSet,
    pub same_driver: DistanceSet,
    pub cross_driver: DistanceSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyTest {
    pub range: [usize; 2],
    /// Same-driver minus cross-driver raw distances.
    pub welch: WelchTest,
    pub same_mean: f64,
    pub cross_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub buckets: Vec<BucketReport>,
    /// Buckets skipped for having fewer than two drivers.
    pub omitted: Vec<[usize; 2]>,
    pub drivers: Vec<DriverHalves>,
    pub test: Option<ConsistencyTest>,
}

impl ConsistencyReport {
    /// The surviving bucket with the highest frame range.
    pub fn longest_bucket(&self) -> Option<&BucketReport> {
        self.buckets.iter().max_by_key(|b| b.range)
    }
}

/// Split a driver's pooled frames at `total / 2`. Fragments shorter than two
/// frames are dropped.
pub fn split_halves(episodes: &[FollowEpisode]) -> (Vec<FollowEpisode>, Vec<FollowEpisode>) {
    let mut ordered: Vec<&FollowEpisode> = episodes.iter().collect();
    ordered.sort_by(|a, b| (a.start_frame, &a.episode_id).cmp(&(b.start_frame, &b.episode_id)));
    let total: usize = ordered.iter().map(|e| e.len()).sum();
    let half = total / 2;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    let mut seen = 0;
    for ep in ordered {
        let n = ep.len();
        if seen + n <= half {
            first.push(ep.clone());
        } else if seen >= half {
            second.push(ep.clone());
        } else {
            let cut = half - seen;
            first.push(ep.slice(0, cut, "-a"));
            second.push(ep.slice(cut, n, "-b"));
        }
        seen += n;
    }
    first.retain(|e| e.len() >= 2);
    second.retain(|e| e.len() >= 2);
    (first, second)
}

fn half_seed(seed: u64, driver: i64, which: u64) -> u64 {
    derive_seed(seed, &[HALF_STREAM, driver as u64, which])
}

pub fn consistency_experiment<F: EpisodeFitter + ?Sized>(
    fitter: &F,
    groups: &BTreeMap<i64, Vec<FollowEpisode>>,
    options: &ConsistencyOptions,
    seed: u64,
) -> Result<ConsistencyReport, AnalysisError> {
    options.validate()?;
    let eligible: Vec<(i64, usize, &Vec<FollowEpisode>)> = groups
        .iter()
        .map(|(&id, eps)| (id, eps.iter().map(FollowEpisode::len).sum::<usize>(), eps))
        .filter(|(_, n, _)| *n >= 2 * options.min_fit_length)
        .collect();

    let halves: Result<Vec<DriverHalves>, AnalysisError> = eligible
        .par_iter()
        .map(|&(id, frames, eps)| {
            let (a, b) = split_halves(eps);
            let first = fitter.fit_episodes(&a, half_seed(seed, id, 0))?.params;
            let second = fitter.fit_episodes(&b, half_seed(seed, id, 1))?.params;
            let first_refit = fitter.fit_episodes(&a, half_seed(seed, id, 2))?.params;
            Ok(DriverHalves {
                driver_id: id,
                frames,
                first,
                second,
                first_refit,
                same_distance: param_distance(&first, &second),
                refit_distance: param_distance(&first, &first_refit),
            })
        })
        .collect();
    let drivers = halves?;
    let space = fitter.space();

    let mut buckets = Vec::new();
    let mut omitted = Vec::new();
    // Raw same-driver and cross-driver samples of the last kept bucket.
    let mut longest_samples = None;
    let mut ordered = options.buckets.clone();
    ordered.sort();
    for (k, range) in ordered.iter().enumerate() {
        let members: Vec<&DriverHalves> =
            drivers.iter().filter(|d| d.frames >= range[0] && d.frames < range[1]).collect();
        if members.len() < 2 {
            warn!("bucket {range:?} has {} drivers, omitted", members.len());
            omitted.push(*range);
            continue;
        }
        let same: Vec<f64> = members.iter().map(|d| d.same_distance).collect();
        let same_n: Vec<f64> = members.iter().map(|d| space.normalized_distance(&d.first, &d.second)).collect();
        let refit: Vec<f64> = members.iter().map(|d| d.refit_distance).collect();
        let refit_n: Vec<f64> = members.iter().map(|d| space.normalized_distance(&d.first, &d.first_refit)).collect();
        let mut rng = rng_from(derive_seed(seed, &[PAIR_STREAM, k as u64]));
        let (mut cross, mut cross_n) = (Vec::new(), Vec::new());
        for _ in 0..options.cross_pairs {
            let i = rng.random_range(0..members.len());
            let mut j = rng.random_range(0..members.len() - 1);
            if j >= i {
                j += 1;
            }
            cross.push(param_distance(&members[i].first, &members[j].second));
            cross_n.push(space.normalized_distance(&members[i].first, &members[j].second));
        }
        buckets.push(BucketReport {
            range: *range,
            driver_ids: members.iter().map(|d| d.driver_id).collect(),
            refit: DistanceSet::of(&refit, &refit_n),
            same_driver: DistanceSet::of(&same, &same_n),
            cross_driver: DistanceSet::of(&cross, &cross_n),
        });
        longest_samples = Some((*range, same, cross));
    }

    let test = longest_samples.and_then(|(range, same, cross)| {
        stats::welch_t_test(&same, &cross).map(|welch| ConsistencyTest {
            range,
            welch,
            same_mean: stats::mean(&same),
            cross_mean: stats::mean(&cross),
        })
    });
    Ok(ConsistencyReport {
        buckets,
        omitted,
        drivers,
        test,
    })
}
