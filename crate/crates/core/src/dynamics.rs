//! Kinematic bicycle model, its inverse, and the IDM car-following law.
//!
//! One step of the plant, for speed `v`, wheelbase `L = wheelbase_ratio * length`:
//!
//! ```text
//! v'   = v + accel * dt
//! dyaw = (v / L) * tan(steer) * dt
//! yaw' = wrap(yaw + dyaw)
//! pos' = pos + (v + v') / 2 * dt * (cos, sin)(yaw + dyaw / 2)
//! ```
//!
//! Speed and yaw updates invert exactly, which is what [`infer_actions`] relies on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{wrap_angle, Action, ActorState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("action {action:?} outside bounds at step {step}")]
    OutOfBounds { action: Action, step: usize },
    #[error("time step must be positive, got {0}")]
    BadDt(f64),
    #[error("trajectory needs at least 2 states, got {0}")]
    TooShort(usize),
    #[error("actor count mismatch: {0} initial states, {1} action sequences")]
    ActorMismatch(usize, usize),
    #[error("IDM gap must be positive, got {0}")]
    NonPositiveGap(f64),
    #[error("invalid IDM parameters: {0}")]
    BadIdmParams(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub accel_max: f64,
    pub steer_max: f64,
    /// Hardest deceleration any controller may command (positive magnitude).
    pub decel_limit: f64,
    pub wheelbase_ratio: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            accel_max: 8.0,
            steer_max: 0.6,
            decel_limit: 9.0,
            wheelbase_ratio: 0.6,
        }
    }
}

impl DynamicsConfig {
    pub fn clamp(&self, a: Action) -> Action {
        Action {
            accel: a.accel.clamp(-self.accel_max, self.accel_max),
            steer: a.steer.clamp(-self.steer_max, self.steer_max),
        }
    }

    pub fn in_bounds(&self, a: &Action) -> bool {
        a.accel.abs() <= self.accel_max && a.steer.abs() <= self.steer_max
    }

    pub fn wheelbase(&self, s: &ActorState) -> f64 {
        self.wheelbase_ratio * s.length
    }
}

pub fn step(state: &ActorState, action: &Action, dt: f64, cfg: &DynamicsConfig) -> Result<ActorState, DynamicsError> {
    step_at(state, action, dt, cfg, 0)
}

fn step_at(
    state: &ActorState,
    action: &Action,
    dt: f64,
    cfg: &DynamicsConfig,
    idx: usize,
) -> Result<ActorState, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::BadDt(dt));
    }
    if state.fields().iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite {
            what: "state",
            step: idx,
        });
    }
    if !(action.accel.is_finite() && action.steer.is_finite()) {
        return Err(DynamicsError::NonFinite {
            what: "action",
            step: idx,
        });
    }
    if !cfg.in_bounds(action) {
        return Err(DynamicsError::OutOfBounds {
            action: *action,
            step: idx,
        });
    }
    let v_next = state.v + action.accel * dt;
    let dyaw = state.v / cfg.wheelbase(state) * action.steer.tan() * dt;
    let heading = state.yaw + 0.5 * dyaw;
    let v_mid = 0.5 * (state.v + v_next);
    Ok(ActorState {
        x: state.x + v_mid * heading.cos() * dt,
        y: state.y + v_mid * heading.sin() * dt,
        yaw: wrap_angle(state.yaw + dyaw),
        v: v_next,
        ..*state
    })
}

/// Integrates every actor through its action sequence. Returns one trajectory
/// per actor (excluding the initial state), each as long as its actions.
pub fn rollout(
    initial: &[ActorState],
    actions: &[Vec<Action>],
    dt: f64,
    cfg: &DynamicsConfig,
) -> Result<Vec<Vec<ActorState>>, DynamicsError> {
    if initial.len() != actions.len() {
        return Err(DynamicsError::ActorMismatch(initial.len(), actions.len()));
    }
    initial
        .iter()
        .zip(actions)
        .map(|(s0, seq)| {
            let mut cur = *s0;
            seq.iter()
                .enumerate()
                .map(|(t, a)| {
                    cur = step_at(&cur, a, dt, cfg, t)?;
                    Ok(cur)
                })
                .collect()
        })
        .collect()
}

/// Speed below which steering is unobservable from yaw change.
pub const STEER_MIN_SPEED: f64 = 0.01;

/// Recovers the actions that map each state to the next; clamped to bounds.
pub fn infer_actions(traj: &[ActorState], dt: f64, cfg: &DynamicsConfig) -> Result<Vec<Action>, DynamicsError> {
    if traj.len() < 2 {
        return Err(DynamicsError::TooShort(traj.len()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::BadDt(dt));
    }
    Ok(traj
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let accel = (b.v - a.v) / dt;
            let steer = if a.v.abs() < STEER_MIN_SPEED {
                0.0
            } else {
                let dyaw = wrap_angle(b.yaw - a.yaw);
                (dyaw * cfg.wheelbase(a) / (a.v * dt)).atan()
            };
            cfg.clamp(Action { accel, steer })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    pub v_desired: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub accel_max: f64,
    pub decel_comfort: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self::highway()
    }
}

impl IdmParams {
    pub fn highway() -> Self {
        Self {
            v_desired: 30.0,
            time_headway: 1.5,
            min_gap: 2.0,
            accel_max: 2.0,
            decel_comfort: 2.5,
            exponent: 4.0,
        }
    }

    pub fn urban() -> Self {
        Self {
            v_desired: 15.0,
            ..Self::highway()
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let all = [
            self.v_desired,
            self.time_headway,
            self.min_gap,
            self.accel_max,
            self.decel_comfort,
            self.exponent,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(DynamicsError::BadIdmParams(format!("{self:?}")))
        }
    }

    /// Desired dynamic gap s*. The velocity-dependent part is floored at zero,
    /// so a faster leader never pushes the follower to brake.
    pub fn desired_gap(&self, v: f64, v_lead: f64) -> f64 {
        let dynamic = v * self.time_headway + v * (v - v_lead) / (2.0 * (self.accel_max * self.decel_comfort).sqrt());
        self.min_gap + dynamic.max(0.0)
    }
}

/// IDM acceleration for bumper-to-bumper `gap`, clamped to `[-decel_limit, accel_max]`.
pub fn idm_accel(gap: f64, v: f64, v_lead: f64, p: &IdmParams, decel_limit: f64) -> Result<f64, DynamicsError> {
    if gap.is_nan() || gap <= 0.0 {
        return Err(DynamicsError::NonPositiveGap(gap));
    }
    p.validate()?;
    let free = 1.0 - (v / p.v_desired).powf(p.exponent);
    let interaction = (p.desired_gap(v, v_lead) / gap).powi(2);
    Ok((p.accel_max * (free - interaction)).clamp(-decel_limit, p.accel_max))
}

/// IDM acceleration with no leader.
pub fn idm_free_accel(v: f64, p: &IdmParams) -> f64 {
    p.accel_max * (1.0 - (v / p.v_desired).powf(p.exponent))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(v: f64) -> ActorState {
        ActorState::car(0.0, 0.0, 0.0, v)
    }

    #[test]
    fn straight_constant_velocity() {
        let s = step(&car(10.0), &Action::default(), 0.1, &DynamicsConfig::default()).unwrap();
        assert!((s.x - 1.0).abs() < 1e-12 && s.y == 0.0 && s.yaw == 0.0 && s.v == 10.0);
    }

    #[test]
    fn euler_speed_update() {
        let a = Action { accel: 2.0, steer: 0.0 };
        let s = step(&car(10.0), &a, 0.1, &DynamicsConfig::default()).unwrap();
        assert!((s.v - 10.2).abs() < 1e-12);
    }

    #[test]
    fn yaw_rate_from_steer() {
        let st = ActorState {
            length: 5.0,
            ..car(10.0)
        };
        let a = Action { accel: 0.0, steer: 0.1 };
        let s = step(&st, &a, 0.1, &DynamicsConfig::default()).unwrap();
        // (10 / 3) * tan(0.1) * 0.1, evaluated independently
        assert!((s.yaw - 0.033_445_0).abs() < 1e-6, "{}", s.yaw);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = DynamicsConfig::default();
        let nan = Action {
            accel: f64::NAN,
            steer: 0.0,
        };
        assert!(step(&car(1.0), &nan, 0.1, &cfg).is_err());
        assert!(step(&car(1.0), &Action::default(), 0.0, &cfg).is_err());
        let big = Action {
            accel: 20.0,
            steer: 0.0,
        };
        assert!(matches!(
            step(&car(1.0), &big, 0.1, &cfg),
            Err(DynamicsError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn rollout_reports_failing_step() {
        let cfg = DynamicsConfig::default();
        let mut seq = vec![Action::default(); 3];
        seq[2].accel = f64::NAN;
        let err = rollout(&[car(1.0)], &[seq], 0.1, &cfg).unwrap_err();
        assert_eq!(
            err,
            DynamicsError::NonFinite {
                what: "action",
                step: 2
            }
        );
    }

    #[test]
    fn stationary_rollout_and_inverse() {
        let cfg = DynamicsConfig::default();
        let traj = rollout(&[car(0.0)], &[vec![Action::default(); 5]], 0.1, &cfg).unwrap();
        assert!(traj[0].iter().all(|s| *s == car(0.0)));
        let acts = infer_actions(&traj[0], 0.1, &cfg).unwrap();
        assert!(acts.iter().all(|a| *a == Action::default()));
    }

    #[test]
    fn constant_accel_telescopes() {
        let cfg = DynamicsConfig::default();
        let a = Action { accel: 1.5, steer: 0.0 };
        let traj = rollout(&[car(3.0)], &[vec![a; 20]], 0.1, &cfg).unwrap();
        for (t, s) in traj[0].iter().enumerate() {
            assert!((s.v - (3.0 + 1.5 * (t + 1) as f64 * 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_clamps_speed_jumps() {
        let cfg = DynamicsConfig::default();
        let traj = [car(10.0), car(12.0)];
        let a = infer_actions(&traj, 0.1, &cfg).unwrap();
        assert_eq!(a[0].accel, cfg.accel_max);
        assert!(infer_actions(&traj[..1], 0.1, &cfg).is_err());
    }

    #[test]
    fn idm_free_flow_equilibrium() {
        let p = IdmParams::highway();
        let a = idm_accel(1e9, p.v_desired, p.v_desired, &p, 9.0).unwrap();
        assert!(a.abs() < 1e-9);
    }

    #[test]
    fn idm_sign_change_at_min_gap() {
        let p = IdmParams::highway();
        let at = idm_accel(p.min_gap, 0.0, 0.0, &p, 9.0).unwrap();
        assert!(at.abs() < 1e-12);
        assert!(idm_accel(p.min_gap * 1.01, 0.0, 0.0, &p, 9.0).unwrap() > 0.0);
        assert!(idm_accel(p.min_gap * 0.99, 0.0, 0.0, &p, 9.0).unwrap() < 0.0);
    }

    #[test]
    fn idm_emergency_regime_clamps() {
        let p = IdmParams::highway();
        // s* = 2 + 30 + 400 / (2 sqrt 5) = 76.72; (s*/10)^2 = 58.9 -> raw accel about -116
        let raw = p.accel_max * (1.0 - (20.0f64 / 30.0).powi(4) - (p.desired_gap(20.0, 0.0) / 10.0).powi(2));
        assert!(raw < -100.0);
        assert_eq!(idm_accel(10.0, 20.0, 0.0, &p, 9.0).unwrap(), -9.0);
        assert!(idm_accel(0.0, 20.0, 0.0, &p, 9.0).is_err());
    }
}
