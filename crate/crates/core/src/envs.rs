//! Cart-and-pole (CP) and non-stationary cart-and-pole (nCP).
//!
//! Dynamics follow the classic frictionless cart-pole formulation with a
//! semi-implicit Euler integrator. Rewards: +1 for every step the pole stays
//! up, -1 on the step the pole passes 15 degrees or the cart leaves
//! [-2.4, 2.4]. Reaching the 500-step cap ends the episode with +1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBS_DIM: usize = 4;
pub const N_ACTIONS: usize = 2;
pub const EPISODE_CAP: usize = 500;
pub const ANGLE_LIMIT_RAD: f64 = 15.0 * std::f64::consts::PI / 180.0;
pub const POSITION_LIMIT: f64 = 2.4;
pub const SOLVED_THRESHOLD: f64 = 495.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    Cp,
    Ncp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_half_length: f64,
    pub force_magnitude: f64,
    pub timestep: f64,
}

impl Default for PhysicsParams {
    /// Canonical cart-pole constants.
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            force_magnitude: 10.0,
            timestep: 0.02,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gravity", self.gravity),
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("pole_half_length", self.pole_half_length),
            ("force_magnitude", self.force_magnitude),
            ("timestep", self.timestep),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be strictly positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Inclusive uniform sampling ranges for the nCP resampled parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NcpRanges {
    pub pole_half_length: (f64, f64),
    pub pole_mass: (f64, f64),
    pub cart_mass: (f64, f64),
}

impl Default for NcpRanges {
    fn default() -> Self {
        Self {
            pole_half_length: (0.25, 1.0),
            pole_mass: (0.05, 0.5),
            cart_mass: (0.5, 2.0),
        }
    }
}

impl NcpRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("ncp_ranges.pole_half_length", self.pole_half_length),
            ("ncp_ranges.pole_mass", self.pole_mass),
            ("ncp_ranges.cart_mass", self.cart_mass),
        ] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::config(name, format!("need 0 < lo <= hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub cart_position: f64,
    pub cart_velocity: f64,
    pub pole_angle: f64,
    pub pole_angular_velocity: f64,
    pub step_count: usize,
    pub terminal: bool,
}

impl EnvState {
    pub fn observation(&self) -> [f64; OBS_DIM] {
        [
            self.cart_position,
            self.cart_velocity,
            self.pole_angle,
            self.pole_angular_velocity,
        ]
    }

    pub fn at(observation: [f64; OBS_DIM]) -> Self {
        Self {
            cart_position: observation[0],
            cart_velocity: observation[1],
            pole_angle: observation[2],
            pole_angular_velocity: observation[3],
            step_count: 0,
            terminal: false,
        }
    }
}

/// Fresh trial: state uniform in [-0.05, 0.05]^4, parameters per mode.
pub fn reset<R: Rng + ?Sized>(mode: EnvMode, ranges: &NcpRanges, rng: &mut R) -> (EnvState, PhysicsParams) {
    let mut obs = [0.0; OBS_DIM];
    for o in &mut obs {
        *o = rng.random_range(-0.05..=0.05);
    }
    let mut params = PhysicsParams::default();
    if mode == EnvMode::Ncp {
        params.pole_half_length = sample_range(rng, ranges.pole_half_length);
        params.pole_mass = sample_range(rng, ranges.pole_mass);
        params.cart_mass = sample_range(rng, ranges.cart_mass);
    }
    (EnvState::at(obs), params)
}

/// One integration step. Action 1 pushes right, 0 pushes left.
pub fn step(state: &EnvState, params: &PhysicsParams, action: usize) -> Result<(EnvState, f64, bool)> {
    if state.terminal {
        return Err(Error::Contract("step called on a terminal state".into()));
    }
    if action >= N_ACTIONS {
        return Err(Error::Input(format!("action {action} outside {{0, 1}}")));
    }
    let force = if action == 1 {
        params.force_magnitude
    } else {
        -params.force_magnitude
    };
    let (sin, cos) = state.pole_angle.sin_cos();
    let total_mass = params.cart_mass + params.pole_mass;
    let polemass_length = params.pole_mass * params.pole_half_length;
    let omega = state.pole_angular_velocity;

    let temp = (force + polemass_length * omega * omega * sin) / total_mass;
    let angular_acc = (params.gravity * sin - cos * temp)
        / (params.pole_half_length * (4.0 / 3.0 - params.pole_mass * cos * cos / total_mass));
    let cart_acc = temp - polemass_length * angular_acc * cos / total_mass;

    let dt = params.timestep;
    let cart_velocity = state.cart_velocity + dt * cart_acc;
    let cart_position = state.cart_position + dt * cart_velocity;
    let pole_angular_velocity = omega + dt * angular_acc;
    let pole_angle = state.pole_angle + dt * pole_angular_velocity;
    let step_count = state.step_count + 1;

    let failed = pole_angle.abs() > ANGLE_LIMIT_RAD || cart_position.abs() > POSITION_LIMIT;
    let done = failed || step_count >= EPISODE_CAP;
    let next = EnvState {
        cart_position,
        cart_velocity,
        pole_angle,
        pole_angular_velocity,
        step_count,
        terminal: done,
    };
    Ok((next, if failed { -1.0 } else { 1.0 }, done))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cp_reset_is_canonical_and_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, p) = reset(EnvMode::Cp, &NcpRanges::default(), &mut rng);
        assert_eq!(p, PhysicsParams::default());
        assert_eq!(p.gravity, 9.8);
        assert_eq!(p.force_magnitude, 10.0);
        assert!(s.observation().iter().all(|v| v.abs() <= 0.05));
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn ncp_resamples_each_trial() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = NcpRanges::default();
        let (_, a) = reset(EnvMode::Ncp, &r, &mut rng);
        let (_, b) = reset(EnvMode::Ncp, &r, &mut rng);
        assert_ne!(a, b);
        assert!((0.25..=1.0).contains(&a.pole_half_length));
        assert!((0.05..=0.5).contains(&a.pole_mass));
        assert!((0.5..=2.0).contains(&a.cart_mass));
    }

    #[test]
    fn collapsed_ranges_give_cp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = NcpRanges {
            pole_half_length: (0.5, 0.5),
            pole_mass: (0.1, 0.1),
            cart_mass: (1.0, 1.0),
        };
        let (_, p) = reset(EnvMode::Ncp, &r, &mut rng);
        assert_eq!(p, PhysicsParams::default());
    }

    #[test]
    fn tipping_past_fifteen_degrees_fails() {
        let mut s = EnvState::at([0.0, 0.0, 16f64.to_radians(), 0.0]);
        s.step_count = 10;
        let (next, r, done) = step(&s, &PhysicsParams::default(), 1).unwrap();
        assert!(next.pole_angle > ANGLE_LIMIT_RAD);
        assert_eq!(r, -1.0);
        assert!(done);
    }

    #[test]
    fn leaving_the_track_fails() {
        let s = EnvState::at([2.5, 0.0, 0.0, 0.0]);
        let (next, r, done) = step(&s, &PhysicsParams::default(), 1).unwrap();
        assert!(next.cart_position > POSITION_LIMIT);
        assert_eq!((r, done), (-1.0, true));
    }

    #[test]
    fn within_limits_is_rewarded() {
        let s = EnvState::at([0.0, 0.0, 14f64.to_radians(), 0.0]);
        let (_, r, done) = step(&s, &PhysicsParams::default(), 1).unwrap();
        assert_eq!((r, done), (1.0, false));
    }

    #[test]
    fn pushing_right_accelerates_right() {
        let s = EnvState::at([0.01, -0.02, 0.01, 0.02]);
        let (next, _, _) = step(&s, &PhysicsParams::default(), 1).unwrap();
        assert!(next.cart_velocity > s.cart_velocity);
        let (next, _, _) = step(&s, &PhysicsParams::default(), 0).unwrap();
        assert!(next.cart_velocity < s.cart_velocity);
    }

    #[test]
    fn stationary_without_forces() {
        let p = PhysicsParams {
            gravity: 0.0,
            force_magnitude: 0.0,
            ..PhysicsParams::default()
        };
        let s = EnvState::at([0.3, 0.0, 0.1, 0.0]);
        let (next, _, _) = step(&s, &p, 0).unwrap();
        assert_eq!(next.observation(), s.observation());
    }

    #[test]
    fn cap_is_a_success_and_terminal_states_refuse_steps() {
        let mut s = EnvState::at([0.0; 4]);
        s.step_count = EPISODE_CAP - 1;
        let (next, r, done) = step(&s, &PhysicsParams::default(), 0).unwrap();
        assert_eq!((r, done), (1.0, true));
        assert!(matches!(step(&next, &PhysicsParams::default(), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic() {
        let s = EnvState::at([0.01, 0.2, -0.03, 0.1]);
        let p = PhysicsParams::default();
        assert_eq!(step(&s, &p, 1).unwrap(), step(&s, &p, 1).unwrap());
    }

    #[test]
    fn validation_rejects_nonpositive() {
        let p = PhysicsParams {
            cart_mass: 0.0,
            ..PhysicsParams::default()
        };
        assert!(p.validate().is_err());
        assert!(PhysicsParams::default().validate().is_ok());
    }
}
