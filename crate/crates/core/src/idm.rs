//! Intelligent Driver Model acceleration law and Euler rollout against a
//! recorded leader velocity profile.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DELTA: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IdmError {
    #[error("nonpositive gap: {0}")]
    NonpositiveGap(f64),
    #[error("collision: gap {} after step", .0.gap)]
    Collision(EgoState),
    #[error("invalid IDM parameters: {0}")]
    InvalidParams(String),
}

/// The five free IDM parameters plus the acceleration exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Minimum standstill spacing, m.
    pub s0: f64,
    /// Desired time headway, s.
    #[serde(rename = "T")]
    pub time_headway: f64,
    /// Maximum acceleration, m/s².
    pub a: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

/// Names of the free parameters in vector order.
pub const PARAM_NAMES: [&str; 5] = ["v0", "s0", "T", "a", "b"];

impl IdmParams {
    pub fn new(v0: f64, s0: f64, time_headway: f64, a: f64, b: f64) -> Self {
        IdmParams {
            v0,
            s0,
            time_headway,
            a,
            b,
            delta: DEFAULT_DELTA,
        }
    }

    pub fn validate(&self) -> Result<(), IdmError> {
        let ok = self.v0 > 0.0
            && self.s0 >= 0.0
            && self.time_headway >= 0.0
            && self.a > 0.0
            && self.b > 0.0
            && self.delta > 0.0
            && self.to_array().iter().all(|x| x.is_finite())
            && self.delta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(IdmError::InvalidParams(format!("{self:?}")))
        }
    }

    /// `[v0, s0, T, a, b]`.
    pub fn to_array(&self) -> [f64; 5] {
        [self.v0, self.s0, self.time_headway, self.a, self.b]
    }

    pub fn from_array(x: [f64; 5], delta: f64) -> Self {
        IdmParams {
            v0: x[0],
            s0: x[1],
            time_headway: x[2],
            a: x[3],
            b: x[4],
            delta,
        }
    }

    /// Steady-state gap when following a leader at speed `v < v0`.
    pub fn equilibrium_gap(&self, v: f64) -> f64 {
        (self.s0 + v * self.time_headway) / (1.0 - (v / self.v0).powf(self.delta)).sqrt()
    }
}

/// Euclidean distance between the raw `[v0, s0, T, a, b]` vectors.
pub fn param_distance(p: &IdmParams, q: &IdmParams) -> f64 {
    p.to_array()
        .iter()
        .zip(q.to_array())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Order of the gap update within an Euler step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EulerScheme {
    /// Gap advanced with the pre-step ego velocity.
    Explicit,
    /// Gap advanced with the freshly updated ego velocity.
    #[default]
    SemiImplicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmOptions {
    /// Clamp the desired dynamic gap at zero so the interaction term never
    /// becomes attractive. Disable for the unmodified law.
    pub clamp_s_star: bool,
    pub scheme: EulerScheme,
}

impl Default for IdmOptions {
    fn default() -> Self {
        IdmOptions {
            clamp_s_star: true,
            scheme: EulerScheme::SemiImplicit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub velocity: f64,
    pub gap: f64,
}

/// IDM acceleration for ego speed `v`, approach rate `delta_v` (ego minus
/// leader, positive when closing) and bumper gap `s`.
pub fn idm_acceleration(
    params: &IdmParams,
    v: f64,
    delta_v: f64,
    s: f64,
    options: &IdmOptions,
) -> Result<f64, IdmError> {
    if !(s > 0.0) {
        return Err(IdmError::NonpositiveGap(s));
    }
    let mut s_star = params.s0
        + v * params.time_headway
        + v * delta_v / (2.0 * (params.a * params.b).sqrt());
    if options.clamp_s_star {
        s_star = s_star.max(0.0);
    }
    let free = (v / params.v0).powf(params.delta);
    let interaction = (s_star / s).powi(2);
    Ok(params.a * (1.0 - free - interaction))
}

/// Advance the ego state by one Euler step under a given acceleration.
///
/// Velocity is clamped at zero. Returns `Err(Collision)` carrying the new
/// state when the updated gap is not positive.
pub fn advance(
    state: EgoState,
    acceleration: f64,
    leader_velocity: f64,
    dt: f64,
    scheme: EulerScheme,
) -> Result<EgoState, IdmError> {
    let velocity = (state.velocity + acceleration * dt).max(0.0);
    let closing_speed = match scheme {
        EulerScheme::Explicit => state.velocity,
        EulerScheme::SemiImplicit => velocity,
    };
    let gap = state.gap + (leader_velocity - closing_speed) * dt;
    let next = EgoState { velocity, gap };
    if gap > 0.0 {
        Ok(next)
    } else {
        Err(IdmError::Collision(next))
    }
}

pub fn step(
    params: &IdmParams,
    state: EgoState,
    leader_velocity: f64,
    dt: f64,
    options: &IdmOptions,
) -> Result<EgoState, IdmError> {
    let acc = idm_acceleration(
        params,
        state.velocity,
        state.velocity - leader_velocity,
        state.gap,
        options,
    )?;
    advance(state, acc, leader_velocity, dt, options.scheme)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub velocities: Vec<f64>,
    pub gaps: Vec<f64>,
    pub collided: bool,
    pub collision_frame: Option<usize>,
}

impl RolloutResult {
    /// Build a rollout by repeatedly applying `next` to the last state.
    /// After a collision the remaining frames repeat the collision state.
    pub(crate) fn simulate<F>(initial: EgoState, leader_velocities: &[f64], mut next: F) -> Self
    where
        F: FnMut(EgoState, f64) -> Result<EgoState, IdmError>,
    {
        let n = leader_velocities.len();
        let mut velocities = Vec::with_capacity(n);
        let mut gaps = Vec::with_capacity(n);
        let mut collision_frame = None;
        if n == 0 {
            return RolloutResult {
                velocities,
                gaps,
                collided: false,
                collision_frame,
            };
        }
        let mut state = initial;
        velocities.push(state.velocity);
        gaps.push(state.gap);
        for k in 1..n {
            if collision_frame.is_none() {
                match next(state, leader_velocities[k - 1]) {
                    Ok(s) => state = s,
                    Err(IdmError::Collision(s)) => {
                        state = s;
                        collision_frame = Some(k);
                    }
                    Err(_) => collision_frame = Some(k),
                }
            }
            velocities.push(state.velocity);
            gaps.push(state.gap);
        }
        RolloutResult {
            velocities,
            gaps,
            collided: collision_frame.is_some(),
            collision_frame,
        }
    }
}

/// Closed-loop IDM rollout: frame 0 is `initial`; frame `k` follows from
/// frame `k - 1` and the leader velocity recorded at frame `k - 1`.
pub fn rollout(
    params: &IdmParams,
    initial: EgoState,
    leader_velocities: &[f64],
    dt: f64,
    options: &IdmOptions,
) -> RolloutResult {
    RolloutResult::simulate(initial, leader_velocities, |s, lead| {
        step(params, s, lead, dt, options)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> IdmParams {
        IdmParams::new(30.0, 2.0, 1.5, 1.0, 2.0)
    }

    fn opts() -> IdmOptions {
        IdmOptions::default()
    }

    #[test]
    fn free_flow_equilibrium() {
        let acc = idm_acceleration(&reference(), 30.0, 0.0, 1e9, &opts()).unwrap();
        assert!(acc.abs() < 1e-12, "{acc}");
    }

    #[test]
    fn standstill_with_open_road() {
        let acc = idm_acceleration(&reference(), 0.0, 0.0, 1e9, &opts()).unwrap();
        assert!((acc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn golden_value() {
        // a * (1 - (20/30)^4 - ((2 + 20*1.5)/30)^2), evaluated separately.
        let acc = idm_acceleration(&reference(), 20.0, 0.0, 30.0, &opts()).unwrap();
        assert!((acc - (-0.335_308_641_975_308_63)).abs() < 1e-12, "{acc}");
    }

    #[test]
    fn nonpositive_gap_is_a_domain_error() {
        assert_eq!(
            idm_acceleration(&reference(), 10.0, 0.0, 0.0, &opts()),
            Err(IdmError::NonpositiveGap(0.0))
        );
        assert!(idm_acceleration(&reference(), 10.0, 0.0, -1.0, &opts()).is_err());
    }

    #[test]
    fn s_star_clamp_only_matters_when_negative() {
        // Ego far slower than the leader drives s* below zero.
        let p = IdmParams::new(30.0, 0.0, 0.0, 1.0, 1.0);
        let exact = IdmOptions { clamp_s_star: false, ..opts() };
        let clamped = idm_acceleration(&p, 10.0, -20.0, 5.0, &opts()).unwrap();
        let raw = idm_acceleration(&p, 10.0, -20.0, 5.0, &exact).unwrap();
        assert!(raw < clamped);
        let free = 1.0 - (10.0f64 / 30.0).powi(4);
        assert!((clamped - free).abs() < 1e-12);
    }

    #[test]
    fn step_examples() {
        let explicit = IdmOptions { scheme: EulerScheme::Explicit, ..opts() };
        let s = advance(EgoState { velocity: 10.0, gap: 20.0 }, 0.0, 10.0, 0.1, EulerScheme::SemiImplicit).unwrap();
        assert_eq!(s, EgoState { velocity: 10.0, gap: 20.0 });

        let s = advance(EgoState { velocity: 0.05, gap: 20.0 }, -1.0, 0.0, 0.1, EulerScheme::SemiImplicit).unwrap();
        assert_eq!(s.velocity, 0.0);

        let s = advance(EgoState { velocity: 10.0, gap: 5.0 }, 0.0, 12.0, 0.1, explicit.scheme).unwrap();
        assert!((s.gap - 5.2).abs() < 1e-12);

        // With the IDM acceleration the explicit gap update ignores the new speed.
        let s = step(&reference(), EgoState { velocity: 10.0, gap: 5.0 }, 12.0, 0.1, &explicit).unwrap();
        assert!((s.gap - 5.2).abs() < 1e-12);
        assert!(s.velocity < 10.0);
    }

    #[test]
    fn step_reports_collision() {
        let err = advance(EgoState { velocity: 10.0, gap: 0.5 }, 0.0, 0.0, 0.1, EulerScheme::Explicit).unwrap_err();
        match err {
            IdmError::Collision(s) => assert!((s.gap + 0.5).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rollout_of_one_frame_is_initial_state() {
        let init = EgoState { velocity: 7.0, gap: 12.0 };
        let r = rollout(&reference(), init, &[9.0], 0.1, &opts());
        assert_eq!(r.velocities, vec![7.0]);
        assert_eq!(r.gaps, vec![12.0]);
        assert!(!r.collided);
    }

    #[test]
    fn converges_to_closed_form_equilibrium() {
        let p = IdmParams::new(33.0, 2.0, 1.2, 1.5, 2.0);
        let v_lead = 20.0;
        let s_e = p.equilibrium_gap(v_lead);
        let leader = vec![v_lead; 6001];
        let r = rollout(&p, EgoState { velocity: 12.0, gap: 60.0 }, &leader, 0.1, &opts());
        let (v, s) = (*r.velocities.last().unwrap(), *r.gaps.last().unwrap());
        assert!(((s - s_e) / s_e).abs() < 1e-3, "{s} vs {s_e}");
        assert!(((v - v_lead) / v_lead).abs() < 1e-3);
    }

    #[test]
    fn braking_leader_causes_collision_for_timid_driver() {
        // A huge comfortable deceleration makes the braking term negligible
        // until the gap is nearly gone.
        let timid = IdmParams::new(30.0, 0.0, 0.0, 0.5, 1000.0);
        // Leader brakes at 10 m/s² from 20 m/s; scan initial gaps for collisions.
        let mut leader: Vec<f64> = (0..60).map(|k| (20.0 - k as f64).max(0.0)).collect();
        leader.extend(std::iter::repeat_n(0.0, 200));
        let colliding: Vec<f64> = (1..=40)
            .map(|g| g as f64 * 0.5)
            .filter(|&g| rollout(&timid, EgoState { velocity: 20.0, gap: g }, &leader, 0.1, &opts()).collided)
            .collect();
        assert!(!colliding.is_empty());
        let r = rollout(&timid, EgoState { velocity: 20.0, gap: colliding[0] }, &leader, 0.1, &opts());
        let k = r.collision_frame.unwrap();
        assert!(r.gaps[k] <= 0.0);
        assert!(r.gaps[k..].iter().all(|g| *g == r.gaps[k]));
        assert!(r.velocities[k..].iter().all(|v| *v == r.velocities[k]));
        assert_eq!(r.velocities.len(), leader.len());
    }

    #[test]
    fn euler_error_is_first_order() {
        let p = IdmParams::new(30.0, 2.0, 1.5, 1.0, 2.0);
        let horizon = 20.0;
        let leader_at = |t: f64| 15.0 + 3.0 * (0.4 * t).sin();
        let terminal = |dt: f64| {
            let n = (horizon / dt).round() as usize + 1;
            let leader: Vec<f64> = (0..n).map(|k| leader_at(k as f64 * dt)).collect();
            let r = rollout(&p, EgoState { velocity: 15.0, gap: 30.0 }, &leader, dt, &opts());
            assert!(!r.collided);
            *r.velocities.last().unwrap()
        };
        let reference = terminal(0.001);
        let e1 = (terminal(0.1) - reference).abs();
        let e2 = (terminal(0.05) - reference).abs();
        let ratio = e1 / e2;
        assert!((1.5..=2.5).contains(&ratio), "ratio {ratio} ({e1} / {e2})");
    }

    #[test]
    fn rollout_is_bit_identical() {
        let leader: Vec<f64> = (0..300).map(|k| 10.0 + (k as f64 * 0.05).sin()).collect();
        let init = EgoState { velocity: 9.0, gap: 15.0 };
        let a = rollout(&reference(), init, &leader, 0.1, &opts());
        let b = rollout(&reference(), init, &leader, 0.1, &opts());
        assert_eq!(a, b);
    }

    fn valid_params() -> impl Strategy<Value = IdmParams> {
        (5.0..50.0f64, 0.0..10.0f64, 0.0..4.0f64, 0.1..5.0f64, 0.1..5.0f64)
            .prop_map(|(v0, s0, t, a, b)| IdmParams::new(v0, s0, t, a, b))
    }

    proptest! {
        #[test]
        fn equilibrium_residual_vanishes(p in valid_params(), frac in 0.0..0.95f64) {
            let v_e = frac * p.v0;
            let s_e = p.equilibrium_gap(v_e);
            prop_assume!(s_e > 0.0);
            let acc = idm_acceleration(&p, v_e, 0.0, s_e, &opts()).unwrap();
            prop_assert!(acc.abs() < 1e-9, "residual {}", acc);
        }

        #[test]
        fn acceleration_monotone(p in valid_params(), v in 0.0..40.0f64, dv in -5.0..5.0f64,
                                 s in 0.5..100.0f64, ddv in 0.0..3.0f64, ds in 0.0..20.0f64) {
            let base = idm_acceleration(&p, v, dv, s, &opts()).unwrap();
            let closing = idm_acceleration(&p, v, dv + ddv, s, &opts()).unwrap();
            let wider = idm_acceleration(&p, v, dv, s + ds, &opts()).unwrap();
            prop_assert!(closing <= base + 1e-12);
            prop_assert!(wider >= base - 1e-12);
        }
    }
}
