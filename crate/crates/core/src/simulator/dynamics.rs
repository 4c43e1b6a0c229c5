//! Planar kinematics with clipped Gaussian noise on turn rate and speed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, AgentState, Control};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// σ_α in radians.
    pub angular: f64,
    /// σ_s in meters.
    pub speed: f64,
    /// Round heading to whole degrees and positions to centimeters.
    #[serde(default)]
    pub quantize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePreset {
    High,
    Mid,
    Low,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { angular: 0.0, speed: 0.0, quantize: false }
    }

    /// Presets relative to the body length: high 9°/30%, mid 6°/15%, low 3°/10%.
    pub fn preset(p: NoisePreset, body_length: f64) -> Self {
        let (deg, frac) = match p {
            NoisePreset::High => (9.0, 0.30),
            NoisePreset::Mid => (6.0, 0.15),
            NoisePreset::Low => (3.0, 0.10),
        };
        Self { angular: f64::to_radians(deg), speed: frac * body_length, quantize: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.angular >= 0.0 && self.speed >= 0.0 && self.angular.is_finite() && self.speed.is_finite()) {
            return Err(Error::Config("noise scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Noise draws of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSample {
    pub angular: f64,
    pub speed: f64,
}

impl NoiseSample {
    pub fn draw(cfg: &NoiseConfig, rng: &mut impl Rng) -> Self {
        let gauss = |sigma: f64, rng: &mut dyn rand::RngCore| {
            if sigma > 0.0 {
                Normal::new(0.0, sigma).unwrap().sample(rng)
            } else {
                0.0
            }
        };
        let angular = gauss(cfg.angular, rng);
        let speed = gauss(cfg.speed, rng);
        Self { angular, speed }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One step with given noise draws.
///
/// `α' = α + sign(α̇)·max(0, |α̇| + εα)` and
/// `l' = l + [cos(εα + o), sin(εα + o)]·max(0, s + εs)`.
/// A zero command stays zero: no turn without `α̇ ≠ 0`, no displacement
/// without `s > 0`.
pub fn apply_dynamics(s: &AgentState, u: &Control, eps: &NoiseSample, quantize: bool) -> AgentState {
    let turn = sign(u.angular_velocity) * (u.angular_velocity.abs() + eps.angular).max(0.0);
    let dist = if u.speed > 0.0 { (u.speed + eps.speed).max(0.0) } else { 0.0 };
    let dir = u.move_direction + eps.angular;
    let mut next = AgentState { x: s.x + dir.cos() * dist, y: s.y + dir.sin() * dist, heading: wrap_angle(s.heading + turn) };
    if quantize {
        next = quantize_state(&next);
    }
    next
}

pub fn quantize_state(s: &AgentState) -> AgentState {
    let heading = wrap_angle(s.heading.to_degrees().round().to_radians());
    AgentState { x: (s.x * 100.0).round() / 100.0, y: (s.y * 100.0).round() / 100.0, heading }
}

/// Sample noise and step the state (before collision handling).
pub fn step_dynamics(s: &AgentState, u: &Control, noise: &NoiseConfig, rng: &mut impl Rng) -> AgentState {
    let eps = NoiseSample::draw(noise, rng);
    apply_dynamics(s, u, &eps, noise.quantize)
}
