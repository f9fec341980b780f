//! Synthetic driver populations with known ground-truth IDM parameters.
//!
//! Each driver draws an archetype from a weighted mixture and is simulated
//! against a leader speed profile with Gaussian acceleration noise. The
//! output uses the same episode representation as ingested data.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::idm::{self, EgoState, IdmOptions, IdmParams};
use crate::seed::{derive_seed, rng_from};
use crate::trajdata::{FollowEpisode, FRAME_DT};

/// Attempts per driver before a spec is declared infeasible.
pub const MAX_REGENERATIONS: usize = 100;
pub const DEFAULT_ACTION_NOISE: f64 = 0.3;
/// Offset added to a driver id to form its synthetic leader id.
pub const LEADER_ID_OFFSET: i64 = 1_000_000;

const ARCHETYPE_STREAM: u64 = 1;
const ATTEMPT_STREAM: u64 = 2;
const LEADER_STREAM: u64 = 3;
const SECOND_HALF_STREAM: u64 = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid population spec: {0}")]
    InvalidSpec(String),
    #[error("archetype `{archetype}` collides with the leader profile in every one of {attempts} attempts")]
    Infeasible { archetype: String, attempts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    pub weight: f64,
    #[serde(flatten)]
    pub params: IdmParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeaderProfile {
    Constant {
        speed: f64,
    },
    /// Smooth ramps between cruising and slow or stopped phases with seeded
    /// durations and rates.
    StopAndGo {
        cruise_speed: f64,
    },
    /// Linear acceleration from `low` to `high` over 70% of the period, then
    /// linear braking back to `low`.
    Sawtooth {
        low: f64,
        high: f64,
        period_frames: usize,
    },
    Recorded {
        series: Vec<f64>,
    },
}

impl LeaderProfile {
    pub fn kind(&self) -> &'static str {
        match self {
            LeaderProfile::Constant { .. } => "constant",
            LeaderProfile::StopAndGo { .. } => "stop_and_go",
            LeaderProfile::Sawtooth { .. } => "sawtooth",
            LeaderProfile::Recorded { .. } => "recorded",
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(format!("{} profile: {m}", self.kind())));
        match self {
            LeaderProfile::Constant { speed } if !(*speed >= 0.0 && speed.is_finite()) => bad("speed must be non-negative"),
            LeaderProfile::StopAndGo { cruise_speed } if !(*cruise_speed > 0.0 && cruise_speed.is_finite()) => {
                bad("cruise_speed must be positive")
            }
            LeaderProfile::Sawtooth { low, high, period_frames } if !(*low >= 0.0 && high > low && *period_frames >= 2) => {
                bad("need 0 <= low < high and period_frames >= 2")
            }
            LeaderProfile::Recorded { series } if series.is_empty() || series.iter().any(|v| !(*v >= 0.0)) => {
                bad("series must be non-empty and non-negative")
            }
            _ => Ok(()),
        }
    }
}

fn cosine_ramp(out: &mut Vec<f64>, from: f64, to: f64, frames: usize) {
    for k in 1..=frames {
        let u = k as f64 / frames as f64;
        out.push(from + (to - from) * (1.0 - (PI * u).cos()) / 2.0);
    }
}

fn hold(out: &mut Vec<f64>, speed: f64, frames: usize) {
    out.extend(std::iter::repeat_n(speed, frames));
}

fn seconds_to_frames(s: f64) -> usize {
    (s / FRAME_DT).round().max(1.0) as usize
}

fn stop_and_go(cruise: f64, frames: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames + 400);
    let mut speed = cruise;
    out.push(speed);
    while out.len() < frames {
        hold(&mut out, speed, seconds_to_frames(rng.random_range(4.0..12.0)));
        let low = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.5) * cruise };
        let brake_rate = rng.random_range(1.0..2.5);
        cosine_ramp(&mut out, speed, low, seconds_to_frames((speed - low) / brake_rate));
        hold(&mut out, low, seconds_to_frames(rng.random_range(2.0..6.0)));
        let target = rng.random_range(0.7..=1.0) * cruise;
        let accel_rate = rng.random_range(0.6..1.8);
        cosine_ramp(&mut out, low, target, seconds_to_frames((target - low) / accel_rate));
        speed = target;
    }
    out.truncate(frames);
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn sawtooth(low: f64, high: f64, period: usize, frames: usize) -> Vec<f64> {
    let rise = ((period as f64 * 0.7).round() as usize).clamp(1, period - 1);
    let fall = period - rise;
    (0..frames)
        .map(|k| {
            let phase = k % period;
            if phase < rise {
                low + (high - low) * phase as f64 / rise as f64
            } else {
                high - (high - low) * (phase - rise) as f64 / fall as f64
            }
        })
        .collect()
}

/// Leader speed series of `frames` samples at 10 Hz.
pub fn leader_profile(kind: &LeaderProfile, frames: usize, seed: u64) -> Result<Vec<f64>, SynthError> {
    kind.validate()?;
    Ok(match kind {
        LeaderProfile::Constant { speed } => vec![*speed; frames],
        LeaderProfile::StopAndGo { cruise_speed } => stop_and_go(*cruise_speed, frames, &mut rng_from(seed)),
        LeaderProfile::Sawtooth { low, high, period_frames } => sawtooth(*low, *high, *period_frames, frames),
        LeaderProfile::Recorded { series } => series.iter().take(frames).copied().collect(),
    })
}

fn default_noise() -> f64 {
    DEFAULT_ACTION_NOISE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub archetypes: Vec<Archetype>,
    /// Standard deviation of the Gaussian acceleration noise, m/s².
    #[serde(default = "default_noise")]
    pub action_noise_std: f64,
    pub leader_profile: LeaderProfile,
    pub n_drivers: usize,
    pub frames_per_driver: usize,
    /// When set, each driver's frame count is drawn uniformly from
    /// `frames_per_driver..=frames_per_driver_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_per_driver_max: Option<usize>,
    /// Redraw the archetype for the second half of every driver's record.
    #[serde(default)]
    pub resample_halves: bool,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.archetypes.is_empty() {
            return bad("at least one archetype is required".into());
        }
        for a in &self.archetypes {
            if !(a.weight > 0.0) {
                return bad(format!("archetype `{}` needs a positive weight", a.name));
            }
            if let Err(e) = a.params.validate() {
                return bad(format!("archetype `{}`: {e}", a.name));
            }
        }
        let total: f64 = self.archetypes.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("archetype weights sum to {total}, expected 1"));
        }
        if !(self.action_noise_std >= 0.0) {
            return bad("action_noise_std must be non-negative".into());
        }
        if self.frames_per_driver < 2 {
            return bad("frames_per_driver must be at least 2".into());
        }
        if matches!(self.frames_per_driver_max, Some(m) if m < self.frames_per_driver) {
            return bad("frames_per_driver_max must not be below frames_per_driver".into());
        }
        self.leader_profile.validate()
    }

    fn draw_archetype(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, a) in self.archetypes.iter().enumerate() {
            acc += a.weight;
            if u < acc {
                return i;
            }
        }
        self.archetypes.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfLabel {
    pub archetype: usize,
    pub archetype_name: String,
    pub params: IdmParams,
    /// First frame governed by these parameters.
    pub from_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverLabel {
    pub archetype: usize,
    pub archetype_name: String,
    pub params: IdmParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_half: Option<HalfLabel>,
}

/// Ground truth for every generated driver, keyed by driver id.
pub type GroundTruthLabel = BTreeMap<i64, DriverLabel>;

fn initial_gap(p: &IdmParams, v: f64) -> f64 {
    let s_e = if v < p.v0 {
        p.equilibrium_gap(v)
    } else {
        p.s0 + v * p.time_headway + 10.0
    };
    s_e.max(2.0)
}

/// Noisy closed-loop simulation; `None` on collision.
fn simulate(
    first: &IdmParams,
    second: Option<(&IdmParams, usize)>,
    leader: &[f64],
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let options = IdmOptions::default();
    let mut state = EgoState {
        velocity: leader[0],
        gap: initial_gap(first, leader[0]),
    };
    let mut velocities = vec![state.velocity];
    let mut gaps = vec![state.gap];
    for k in 1..leader.len() {
        let params = match second {
            Some((p, from)) if k - 1 >= from => p,
            _ => first,
        };
        let lead = leader[k - 1];
        let acc = idm::idm_acceleration(params, state.velocity, state.velocity - lead, state.gap, &options).ok()?;
        let noise = if noise_std > 0.0 {
            noise_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        } else {
            0.0
        };
        state = idm::advance(state, acc + noise, lead, FRAME_DT, options.scheme).ok()?;
        velocities.push(state.velocity);
        gaps.push(state.gap);
    }
    Some((velocities, gaps))
}

fn generate_driver(spec: &PopulationSpec, driver_id: i64) -> Result<(FollowEpisode, DriverLabel), SynthError> {
    let mut pick = rng_from(derive_seed(spec.seed, &[ARCHETYPE_STREAM, driver_id as u64]));
    let first = spec.draw_archetype(&mut pick);
    let frames = match spec.frames_per_driver_max {
        Some(max) => pick.random_range(spec.frames_per_driver..=max),
        None => spec.frames_per_driver,
    };
    let second = spec.resample_halves.then(|| {
        let mut r = rng_from(derive_seed(spec.seed, &[SECOND_HALF_STREAM, driver_id as u64]));
        spec.draw_archetype(&mut r)
    });
    let first_params = spec.archetypes[first].params;
    let split = frames / 2;
    let second_params = second.map(|i| (&spec.archetypes[i].params, split));

    for attempt in 0..MAX_REGENERATIONS as u64 {
        let sub = derive_seed(spec.seed, &[ATTEMPT_STREAM, driver_id as u64, attempt]);
        let leader = leader_profile(&spec.leader_profile, frames, derive_seed(sub, &[LEADER_STREAM]))?;
        if leader.len() < 2 {
            return Err(SynthError::InvalidSpec("leader profile shorter than two frames".into()));
        }
        let mut noise_rng = rng_from(sub);
        let Some((ego, gap)) = simulate(&first_params, second_params, &leader, spec.action_noise_std, &mut noise_rng) else {
            continue;
        };
        let episode = FollowEpisode {
            episode_id: format!("synth-{driver_id:05}"),
            driver_id,
            leader_id: driver_id + LEADER_ID_OFFSET,
            lane_id: 1,
            start_frame: 0,
            dt: FRAME_DT,
            length: ego.len(),
            ego_velocity: ego,
            leader_velocity: leader,
            gap,
            truncated_by: None,
        };
        let label = DriverLabel {
            archetype: first,
            archetype_name: spec.archetypes[first].name.clone(),
            params: first_params,
            second_half: second.map(|i| HalfLabel {
                archetype: i,
                archetype_name: spec.archetypes[i].name.clone(),
                params: spec.archetypes[i].params,
                from_frame: split + 1,
            }),
        };
        return Ok((episode, label));
    }
    Err(SynthError::Infeasible {
        archetype: spec.archetypes[first].name.clone(),
        attempts: MAX_REGENERATIONS,
    })
}

/// Generate one episode per driver (ids `1..=n_drivers`) plus labels.
pub fn generate(spec: &PopulationSpec) -> Result<(Vec<FollowEpisode>, GroundTruthLabel), SynthError> {
    spec.validate()?;
    let results: Result<Vec<_>, _> = (1..=spec.n_drivers as i64)
        .into_par_iter()
        .map(|id| generate_driver(spec, id))
        .collect();
    let mut episodes = Vec::with_capacity(spec.n_drivers);
    let mut labels = GroundTruthLabel::new();
    for (ep, label) in results? {
        labels.insert(ep.driver_id, label);
        episodes.push(ep);
    }
    Ok((episodes, labels))
}
