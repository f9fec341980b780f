//! Black-box IDM calibration against recorded velocities.
//!
//! The objective is the closed-loop velocity MSE: every episode is rolled out
//! from its recorded initial speed and gap against its recorded leader, and
//! squared velocity errors are pooled over all frames. The optimizer is
//! staged: uniform exploration for the first fifth of the budget, then a
//! restarted Nelder-Mead search around the incumbent whose initial simplex
//! edge anneals geometrically from 10% to 1% of each parameter's range.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::idm::{self, EgoState, IdmOptions, IdmParams, DEFAULT_DELTA, PARAM_NAMES};
use crate::seed::{derive_seed, rng_from};
use crate::stats;
use crate::trajdata::FollowEpisode;

/// Share of the trial budget spent on uniform exploration.
pub const EXPLORATION_FRACTION: f64 = 0.2;
const INITIAL_STEP: f64 = 0.25;
const FINAL_STEP: f64 = 0.01;
/// Restart once the simplex shrinks below this fraction of its initial edge.
const RESTART_TOL: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("no data")]
    NoData,
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid calibration settings: {0}")]
    InvalidSettings(String),
}

/// Closed interval, serialized as `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        ParamRange { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

impl From<[f64; 2]> for ParamRange {
    fn from(v: [f64; 2]) -> Self {
        ParamRange::new(v[0], v[1])
    }
}

impl From<ParamRange> for [f64; 2] {
    fn from(r: ParamRange) -> Self {
        [r.lo, r.hi]
    }
}

/// Box constraints for the five free IDM parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub v0: ParamRange,
    pub s0: ParamRange,
    #[serde(rename = "T")]
    pub time_headway: ParamRange,
    pub a: ParamRange,
    pub b: ParamRange,
    /// Exponent, held fixed.
    pub delta: f64,
    /// Parameters pinned to a value and excluded from the search, by name.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub fixed: BTreeMap<String, f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            v0: ParamRange::new(1.0, 60.0),
            s0: ParamRange::new(0.0, 15.0),
            time_headway: ParamRange::new(0.0, 5.0),
            a: ParamRange::new(0.05, 10.0),
            b: ParamRange::new(0.05, 10.0),
            delta: DEFAULT_DELTA,
            fixed: BTreeMap::new(),
        }
    }
}

impl SearchSpace {
    pub fn ranges(&self) -> [ParamRange; 5] {
        [self.v0, self.s0, self.time_headway, self.a, self.b]
    }

    /// Pin parameter `name` (one of `v0`, `s0`, `T`, `a`, `b`) to `value`.
    pub fn with_fixed(mut self, name: &str, value: f64) -> Self {
        self.fixed.insert(name.to_string(), value);
        self
    }

    fn fixed_values(&self) -> [Option<f64>; 5] {
        PARAM_NAMES.map(|n| self.fixed.get(n).copied())
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        for (name, r) in PARAM_NAMES.iter().zip(self.ranges()) {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo < r.hi) {
                return Err(CalibError::InvalidSpace(format!(
                    "{name}: bounds [{}, {}] must be finite with lower < upper",
                    r.lo, r.hi
                )));
            }
        }
        for name in self.fixed.keys() {
            if !PARAM_NAMES.contains(&name.as_str()) {
                return Err(CalibError::InvalidSpace(format!("unknown fixed parameter `{name}`")));
            }
        }
        let lower = IdmParams::from_array(self.ranges().map(|r| r.lo), self.delta);
        if lower.v0 <= 0.0 || lower.s0 < 0.0 || lower.time_headway < 0.0 || lower.a <= 0.0 || lower.b <= 0.0 || !(self.delta > 0.0) {
            return Err(CalibError::InvalidSpace(
                "bounds admit invalid IDM parameters".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, p: &IdmParams) -> bool {
        let fixed = self.fixed_values();
        p.to_array()
            .iter()
            .zip(self.ranges())
            .zip(fixed)
            .all(|((x, r), f)| match f {
                Some(v) => *x == v,
                None => r.contains(*x),
            })
    }

    /// Euclidean distance after scaling every coordinate by its range width.
    pub fn normalized_distance(&self, p: &IdmParams, q: &IdmParams) -> f64 {
        p.to_array()
            .iter()
            .zip(q.to_array())
            .zip(self.ranges())
            .map(|((x, y), r)| ((x - y) / r.width()).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// How squared errors from several episodes are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over all frames of all episodes.
    #[default]
    Frames,
    /// Mean of per-episode MSEs.
    Episodes,
}

/// Closed-loop velocity MSE, pooled per `pooling`.
pub fn objective_with(
    params: &IdmParams,
    episodes: &[FollowEpisode],
    options: &IdmOptions,
    pooling: Pooling,
) -> f64 {
    let mut total = 0.0;
    let mut frames = 0usize;
    let mut episode_mse_sum = 0.0;
    for ep in episodes {
        let initial = EgoState {
            velocity: ep.ego_velocity[0],
            gap: ep.gap[0],
        };
        let r = idm::rollout(params, initial, &ep.leader_velocity, ep.dt, options);
        let sse: f64 = r
            .velocities
            .iter()
            .zip(&ep.ego_velocity)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        total += sse;
        frames += ep.len();
        episode_mse_sum += sse / ep.len() as f64;
    }
    let value = match pooling {
        Pooling::Frames => total / frames as f64,
        Pooling::Episodes => episode_mse_sum / episodes.len() as f64,
    };
    if value.is_nan() {
        f64::INFINITY
    } else {
        value
    }
}

/// Frame-pooled closed-loop velocity MSE with default IDM options.
pub fn objective(params: &IdmParams, episodes: &[FollowEpisode]) -> f64 {
    objective_with(params, episodes, &IdmOptions::default(), Pooling::Frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: IdmParams,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub params: IdmParams,
    pub objective: f64,
    pub n_trials: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trial_log: Vec<Trial>,
}

/// Trial logs are kept in full up to this many trials.
pub const MAX_LOGGED_TRIALS: usize = 10_000;

/// Calibration settings shared by every fit in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub space: SearchSpace,
    pub n_trials: usize,
    pub idm: IdmOptions,
    pub pooling: Pooling,
}

impl Calibrator {
    pub fn new(space: SearchSpace, n_trials: usize) -> Self {
        Calibrator {
            space,
            n_trials,
            idm: IdmOptions::default(),
            pooling: Pooling::Frames,
        }
    }

    pub fn objective(&self, params: &IdmParams, episodes: &[FollowEpisode]) -> f64 {
        objective_with(params, episodes, &self.idm, self.pooling)
    }

    /// Run the staged search on one pooled episode set.
    pub fn fit(&self, episodes: &[FollowEpisode], seed: u64) -> Result<CalibrationResult, CalibError> {
        if episodes.is_empty() {
            return Err(CalibError::NoData);
        }
        if self.n_trials == 0 {
            return Err(CalibError::InvalidSettings("n_trials must be at least 1".into()));
        }
        self.space.validate()?;

        let ranges = self.space.ranges();
        let fixed = self.space.fixed_values();
        let delta = self.space.delta;
        let mut rng = rng_from(seed);
        let n_explore = ((self.n_trials as f64 * EXPLORATION_FRACTION).ceil() as usize).max(1);
        let n_local = self.n_trials.saturating_sub(n_explore);
        let keep_log = self.n_trials <= MAX_LOGGED_TRIALS;

        let mut trial_log = Vec::with_capacity(if keep_log { self.n_trials } else { 0 });
        let mut best: Option<Trial> = None;
        let record = |x: [f64; 5], best: &mut Option<Trial>, log: &mut Vec<Trial>| -> f64 {
            let params = IdmParams::from_array(x, delta);
            let objective = self.objective(&params, episodes);
            let trial = Trial { params, objective };
            if best.as_ref().is_none_or(|b| objective < b.objective) {
                *best = Some(trial.clone());
            }
            if keep_log {
                log.push(trial);
            }
            objective
        };

        for _ in 0..n_explore {
            let x: [f64; 5] = std::array::from_fn(|i| match fixed[i] {
                Some(v) => v,
                None => rng.random_range(ranges[i].lo..=ranges[i].hi),
            });
            record(x, &mut best, &mut trial_log);
        }

        let free: Vec<usize> = (0..5).filter(|&i| fixed[i].is_none()).collect();
        let incumbent = best.as_ref().expect("exploration produced a trial").params.to_array();
        let best_objective = best.as_ref().map_or(f64::INFINITY, |b| b.objective);
        let mut local = LocalSearch {
            free: &free,
            ranges: &ranges,
            base: incumbent,
            budget: n_local,
            eval: |x: [f64; 5]| record(x, &mut best, &mut trial_log),
        };
        local.run(&mut rng, best_objective);

        let best = best.expect("at least one trial");
        Ok(CalibrationResult {
            params: best.params,
            objective: best.objective,
            n_trials: self.n_trials,
            seed,
            trial_log,
        })
    }

    /// Independent fit per driver with seeds derived from `seed` and the
    /// driver id. Drivers without episodes are omitted.
    pub fn fit_per_driver(
        &self,
        dataset: &BTreeMap<i64, Vec<FollowEpisode>>,
        seed: u64,
    ) -> Result<BTreeMap<i64, CalibrationResult>, CalibError> {
        fit_groups(self, dataset, seed)
    }

    /// Repeated fits of the same data with the given seeds.
    pub fn fit_noise_with_seeds(
        &self,
        episodes: &[FollowEpisode],
        seeds: &[u64],
    ) -> Result<FitNoiseEstimate, CalibError> {
        noise_from_seeds(self, episodes, seeds)
    }

    pub fn estimate_fit_noise(
        &self,
        episodes: &[FollowEpisode],
        n_repeats: usize,
        seed: u64,
    ) -> Result<FitNoiseEstimate, CalibError> {
        fit_noise_with(self, episodes, n_repeats, seed)
    }
}

/// Anything that calibrates an episode set: a [`Calibrator`] or a wrapper
/// such as a result cache.
pub trait EpisodeFitter: Sync {
    fn space(&self) -> &SearchSpace;
    fn fit_episodes(&self, episodes: &[FollowEpisode], seed: u64) -> Result<CalibrationResult, CalibError>;
}

impl EpisodeFitter for Calibrator {
    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn fit_episodes(&self, episodes: &[FollowEpisode], seed: u64) -> Result<CalibrationResult, CalibError> {
        self.fit(episodes, seed)
    }
}

/// Per-driver fits in parallel, seeded with [`driver_seed`].
pub fn fit_groups<F: EpisodeFitter + ?Sized>(
    fitter: &F,
    dataset: &BTreeMap<i64, Vec<FollowEpisode>>,
    seed: u64,
) -> Result<BTreeMap<i64, CalibrationResult>, CalibError> {
    let drivers: Vec<(&i64, &Vec<FollowEpisode>)> = dataset.iter().filter(|(_, eps)| !eps.is_empty()).collect();
    let fits: Result<Vec<_>, _> = drivers
        .par_iter()
        .map(|(id, eps)| fitter.fit_episodes(eps, driver_seed(seed, **id)).map(|r| (**id, r)))
        .collect();
    Ok(fits?.into_iter().collect())
}

fn noise_from_seeds<F: EpisodeFitter + ?Sized>(
    fitter: &F,
    episodes: &[FollowEpisode],
    seeds: &[u64],
) -> Result<FitNoiseEstimate, CalibError> {
    if seeds.len() < 2 {
        return Err(CalibError::InvalidSettings("fit noise needs at least two repeats".into()));
    }
    let fits: Result<Vec<_>, _> = seeds.iter().map(|&s| fitter.fit_episodes(episodes, s)).collect();
    let params: Vec<IdmParams> = fits?.into_iter().map(|r| r.params).collect();
    Ok(FitNoiseEstimate::from_fits(&params, fitter.space()))
}

/// Refit the same data `n_repeats` times with seeds derived from `seed`.
pub fn fit_noise_with<F: EpisodeFitter + ?Sized>(
    fitter: &F,
    episodes: &[FollowEpisode],
    n_repeats: usize,
    seed: u64,
) -> Result<FitNoiseEstimate, CalibError> {
    let seeds: Vec<u64> = (0..n_repeats as u64).map(|r| derive_seed(seed, &[REFIT_STREAM, r])).collect();
    noise_from_seeds(fitter, episodes, &seeds)
}

/// Nelder-Mead in range-normalized coordinates, restarted around the
/// incumbent whenever the simplex collapses. The initial simplex edge
/// anneals geometrically from `INITIAL_STEP` to `FINAL_STEP` over the budget.
struct LocalSearch<'a, F: FnMut([f64; 5]) -> f64> {
    free: &'a [usize],
    ranges: &'a [ParamRange; 5],
    base: [f64; 5],
    budget: usize,
    eval: F,
}

type Vertex = (Vec<f64>, f64);

impl<F: FnMut([f64; 5]) -> f64> LocalSearch<'_, F> {
    fn to_params(&self, y: &[f64]) -> [f64; 5] {
        let mut x = self.base;
        for (k, &i) in self.free.iter().enumerate() {
            let r = self.ranges[i];
            x[i] = (r.lo + y[k] * r.width()).clamp(r.lo, r.hi);
        }
        x
    }

    fn to_unit(&self, x: &[f64; 5]) -> Vec<f64> {
        self.free
            .iter()
            .map(|&i| (x[i] - self.ranges[i].lo) / self.ranges[i].width())
            .collect()
    }

    fn try_eval(&mut self, y: Vec<f64>, used: &mut usize) -> Option<Vertex> {
        if *used >= self.budget {
            return None;
        }
        *used += 1;
        let y: Vec<f64> = y.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let x = self.to_params(&y);
        let f = (self.eval)(x);
        Some((y, f))
    }

    fn run(&mut self, rng: &mut impl Rng, start_objective: f64) {
        let n = self.free.len();
        if n == 0 {
            return;
        }
        let mut used = 0;
        let mut best: Vertex = (self.to_unit(&self.base), start_objective);
        while used < self.budget {
            let progress = used as f64 / self.budget as f64;
            let size = INITIAL_STEP * (FINAL_STEP / INITIAL_STEP).powf(progress);
            let mut simplex = vec![best.clone()];
            for k in 0..n {
                let mut y = best.0.clone();
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                y[k] = if (0.0..=1.0).contains(&(y[k] + dir * size)) { y[k] + dir * size } else { y[k] - dir * size };
                match self.try_eval(y, &mut used) {
                    Some(v) => simplex.push(v),
                    None => break,
                }
            }
            if simplex.len() == n + 1 {
                self.descend(&mut simplex, size * RESTART_TOL, &mut used);
            }
            for v in simplex {
                if v.1 < best.1 {
                    best = v;
                }
            }
        }
    }

    /// Standard reflection, expansion, contraction and shrink moves until
    /// the simplex diameter drops below `tol` or the budget runs out.
    fn descend(&mut self, simplex: &mut [Vertex], tol: f64, used: &mut usize) {
        let n = simplex.len() - 1;
        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let diameter = simplex[1..]
                .iter()
                .map(|v| v.0.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if diameter < tol {
                return;
            }
            let centroid: Vec<f64> =
                (0..n).map(|k| simplex[..n].iter().map(|v| v.0[k]).sum::<f64>() / n as f64).collect();
            let worst = simplex[n].clone();
            let toward = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (worst.0[k] - centroid[k])).collect() };

            let Some(reflected) = self.try_eval(toward(-1.0), used) else { return };
            if reflected.1 < simplex[0].1 {
                let Some(expanded) = self.try_eval(toward(-2.0), used) else {
                    simplex[n] = reflected;
                    return;
                };
                simplex[n] = if expanded.1 < reflected.1 { expanded } else { reflected };
            } else if reflected.1 < simplex[n - 1].1 {
                simplex[n] = reflected;
            } else {
                let t = if reflected.1 < worst.1 { -0.5 } else { 0.5 };
                let Some(contracted) = self.try_eval(toward(t), used) else { return };
                if contracted.1 < worst.1.min(reflected.1) {
                    simplex[n] = contracted;
                } else {
                    let anchor = simplex[0].0.clone();
                    for v in simplex.iter_mut().skip(1) {
                        let y: Vec<f64> = anchor.iter().zip(&v.0).map(|(a, b)| a + 0.5 * (b - a)).collect();
                        let Some(shrunk) = self.try_eval(y, used) else { return };
                        *v = shrunk;
                    }
                }
            }
        }
    }
}
const DRIVER_STREAM: u64 = 0x6472_6976;
const REFIT_STREAM: u64 = 0x7265_6669;

/// Seed used for `driver_id` inside [`Calibrator::fit_per_driver`].
pub fn driver_seed(seed: u64, driver_id: i64) -> u64 {
    derive_seed(seed, &[DRIVER_STREAM, driver_id as u64])
}

/// Fit with default IDM options and frame pooling.
pub fn fit(
    episodes: &[FollowEpisode],
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
) -> Result<CalibrationResult, CalibError> {
    Calibrator::new(space.clone(), n_trials).fit(episodes, seed)
}

pub fn fit_per_driver(
    dataset: &BTreeMap<i64, Vec<FollowEpisode>>,
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
) -> Result<BTreeMap<i64, CalibrationResult>, CalibError> {
    Calibrator::new(space.clone(), n_trials).fit_per_driver(dataset, seed)
}

pub fn estimate_fit_noise(
    episodes: &[FollowEpisode],
    space: &SearchSpace,
    n_trials: usize,
    n_repeats: usize,
    seed: u64,
) -> Result<FitNoiseEstimate, CalibError> {
    Calibrator::new(space.clone(), n_trials).estimate_fit_noise(episodes, n_repeats, seed)
}

/// Spread of repeated fits on identical data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitNoiseEstimate {
    pub n_repeats: usize,
    /// Sample standard deviation per parameter, keyed by name.
    pub param_std: BTreeMap<String, f64>,
    /// Mean pairwise Euclidean distance between raw parameter vectors.
    pub mean_pairwise_distance: f64,
    /// Same, with coordinates scaled by search-range width.
    pub mean_pairwise_normalized_distance: f64,
}

impl FitNoiseEstimate {
    pub fn from_fits(fits: &[IdmParams], space: &SearchSpace) -> Self {
        let mut param_std = BTreeMap::new();
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            let column: Vec<f64> = fits.iter().map(|p| p.to_array()[i]).collect();
            param_std.insert(name.to_string(), stats::sample_std(&column));
        }
        let mut raw = Vec::new();
        let mut normalized = Vec::new();
        for i in 0..fits.len() {
            for j in i + 1..fits.len() {
                raw.push(idm::param_distance(&fits[i], &fits[j]));
                normalized.push(space.normalized_distance(&fits[i], &fits[j]));
            }
        }
        FitNoiseEstimate {
            n_repeats: fits.len(),
            param_std,
            mean_pairwise_distance: if raw.is_empty() { 0.0 } else { stats::mean(&raw) },
            mean_pairwise_normalized_distance: if normalized.is_empty() { 0.0 } else { stats::mean(&normalized) },
        }
    }

    /// Entry-wise average of several estimates (e.g. one per driver).
    pub fn average(estimates: &[FitNoiseEstimate]) -> Option<FitNoiseEstimate> {
        if estimates.is_empty() {
            return None;
        }
        let n = estimates.len() as f64;
        let mut param_std = BTreeMap::new();
        for name in PARAM_NAMES {
            let total: f64 = estimates.iter().map(|e| e.std(name)).sum();
            param_std.insert(name.to_string(), total / n);
        }
        Some(FitNoiseEstimate {
            n_repeats: estimates[0].n_repeats,
            param_std,
            mean_pairwise_distance: estimates.iter().map(|e| e.mean_pairwise_distance).sum::<f64>() / n,
            mean_pairwise_normalized_distance: estimates
                .iter()
                .map(|e| e.mean_pairwise_normalized_distance)
                .sum::<f64>()
                / n,
        })
    }

    pub fn std(&self, name: &str) -> f64 {
        self.param_std.get(name).copied().unwrap_or(0.0)
    }
}
