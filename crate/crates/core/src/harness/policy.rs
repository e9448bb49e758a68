//! Open-loop nominal driver inputs built from steering and force families.

use std::f64::consts::TAU;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ActuatorBounds, ControlInput};
use crate::training::{ForceFamily, SteeringFamily};

/// Steering-rate schedule (rad/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SteeringProfile {
    /// Constant rate over a window starting after a delay.
    Ramp { start: f64, duration: f64, rate: f64 },
    /// Rate of `amplitude * sin(2 pi freq t + phase)`.
    Sinusoid { amplitude: f64, freq: f64, phase: f64 },
    /// Constant rate from the start for `duration`.
    ConstantRate { rate: f64, duration: f64 },
    /// Fastest admissible change of `change` rad starting at `start`.
    Step { start: f64, change: f64, max_rate: f64 },
}

impl SteeringProfile {
    pub fn family(&self) -> SteeringFamily {
        match self {
            SteeringProfile::Ramp { .. } => SteeringFamily::Ramp,
            SteeringProfile::Sinusoid { .. } => SteeringFamily::Sinusoid,
            SteeringProfile::ConstantRate { .. } => SteeringFamily::ConstantRate,
            SteeringProfile::Step { .. } => SteeringFamily::Step,
        }
    }

    pub fn rate(&self, t: f64) -> f64 {
        match *self {
            SteeringProfile::Ramp { start, duration, rate } => {
                if t >= start && t < start + duration {
                    rate
                } else {
                    0.0
                }
            }
            SteeringProfile::Sinusoid { amplitude, freq, phase } => {
                amplitude * TAU * freq * (TAU * freq * t + phase).cos()
            }
            SteeringProfile::ConstantRate { rate, duration } => {
                if t < duration {
                    rate
                } else {
                    0.0
                }
            }
            SteeringProfile::Step { start, change, max_rate } => {
                if t >= start && t < start + change.abs() / max_rate {
                    max_rate.copysign(change)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Longitudinal force schedule (N).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ForceProfile {
    Step { before: f64, after: f64, at: f64 },
    Constant { force: f64 },
    Ramp { from: f64, to: f64, start: f64, duration: f64 },
    Sinusoid { mean: f64, amplitude: f64, freq: f64 },
    /// `(end_time, force)` pieces; the last force holds afterwards.
    Multiphase { phases: Vec<(f64, f64)> },
}

impl ForceProfile {
    pub fn family(&self) -> ForceFamily {
        match self {
            ForceProfile::Step { .. } => ForceFamily::Step,
            ForceProfile::Constant { .. } => ForceFamily::Constant,
            ForceProfile::Ramp { .. } => ForceFamily::Ramp,
            ForceProfile::Sinusoid { .. } => ForceFamily::Sinusoid,
            ForceProfile::Multiphase { .. } => ForceFamily::Multiphase,
        }
    }

    pub fn force(&self, t: f64) -> f64 {
        match self {
            ForceProfile::Step { before, after, at } => {
                if t < *at {
                    *before
                } else {
                    *after
                }
            }
            ForceProfile::Constant { force } => *force,
            ForceProfile::Ramp { from, to, start, duration } => {
                let s = ((t - start) / duration).clamp(0.0, 1.0);
                from + (to - from) * s
            }
            ForceProfile::Sinusoid { mean, amplitude, freq } => mean + amplitude * (TAU * freq * t).sin(),
            ForceProfile::Multiphase { phases } => phases
                .iter()
                .find(|(end, _)| t < *end)
                .or(phases.last())
                .map_or(0.0, |p| p.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalPolicy {
    pub steering: SteeringProfile,
    pub force: ForceProfile,
}

impl NominalPolicy {
    /// Command at time `t`, clipped to the actuator box.
    pub fn command(&self, t: f64, bounds: &ActuatorBounds) -> ControlInput {
        bounds.clamp(ControlInput::new(self.steering.rate(t), self.force.force(t)))
    }
}

/// Sampling weights over the families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyMix {
    /// Ramp, sinusoid, constant-rate, step.
    pub steering: [f64; 4],
    /// Step, constant, ramp, sinusoid, multiphase.
    pub force: [f64; 5],
}

impl Default for FamilyMix {
    fn default() -> Self {
        Self {
            steering: [0.479, 0.417, 0.052, 0.052],
            force: [0.233, 0.217, 0.198, 0.181, 0.171],
        }
    }
}

impl FamilyMix {
    pub fn is_valid(&self) -> bool {
        let ok = |w: &[f64]| w.iter().all(|x| x.is_finite() && *x >= 0.0) && w.iter().sum::<f64>() > 0.0;
        ok(&self.steering) && ok(&self.force)
    }
}

fn signed<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Draws a policy. The total steering excursion stays within 0.4 rad and
/// forces within ±4 kN before clipping; `horizon` bounds switching times.
pub fn sample_policy<R: Rng + ?Sized>(rng: &mut R, mix: &FamilyMix, horizon: f64) -> NominalPolicy {
    let st = WeightedIndex::new(mix.steering).expect("valid steering weights").sample(rng);
    let fo = WeightedIndex::new(mix.force).expect("valid force weights").sample(rng);
    let late = (0.5 * horizon).max(0.1);
    let steering = match SteeringFamily::ALL[st] {
        SteeringFamily::Ramp => {
            let rate = signed(rng, 0.05, 0.5);
            let max_dur = 0.4 / rate.abs();
            SteeringProfile::Ramp {
                start: rng.random_range(0.0..late),
                duration: rng.random_range(0.1_f64.min(max_dur)..max_dur),
                rate,
            }
        }
        SteeringFamily::Sinusoid => SteeringProfile::Sinusoid {
            amplitude: rng.random_range(0.02..0.25),
            freq: rng.random_range(0.1..0.6),
            phase: rng.random_range(0.0..TAU),
        },
        SteeringFamily::ConstantRate => {
            let rate = signed(rng, 0.02, 0.2);
            SteeringProfile::ConstantRate {
                rate,
                duration: rng.random_range(0.5..(0.4 / rate.abs()).max(0.6)),
            }
        }
        SteeringFamily::Step => SteeringProfile::Step {
            start: rng.random_range(0.0..late),
            change: signed(rng, 0.05, 0.4),
            max_rate: 1.0,
        },
    };
    let mut f = || rng.random_range(-4000.0..4000.0);
    let (a, b) = (f(), f());
    let force = match ForceFamily::ALL[fo] {
        ForceFamily::Step => ForceProfile::Step {
            before: a,
            after: b,
            at: rng.random_range(0.0..late),
        },
        ForceFamily::Constant => ForceProfile::Constant { force: a },
        ForceFamily::Ramp => ForceProfile::Ramp {
            from: a,
            to: b,
            start: rng.random_range(0.0..late),
            duration: rng.random_range(0.5..late.max(0.6)),
        },
        ForceFamily::Sinusoid => ForceProfile::Sinusoid {
            mean: 0.5 * a,
            amplitude: rng.random_range(200.0..3000.0),
            freq: rng.random_range(0.1..1.0),
        },
        ForceFamily::Multiphase => {
            let n = rng.random_range(2..=4);
            let mut t = 0.0;
            let mut phases = Vec::with_capacity(n);
            for _ in 0..n {
                t += rng.random_range(0.5..late.max(0.6));
                phases.push((t, rng.random_range(-4000.0..4000.0)));
            }
            ForceProfile::Multiphase { phases }
        }
    };
    NominalPolicy { steering, force }
}
