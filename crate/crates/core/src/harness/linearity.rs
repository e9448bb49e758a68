//! Control-linearity error of the previewed barrier.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ActuatorBounds, ControlInput, WorldState};
use crate::geometry::Polygon;
use crate::models::DynamicsModel;
use crate::safety::{preview_barrier, DcbfConfig};

/// Steering-rate perturbation (rad/s).
pub const STEERING_PERTURBATION: f64 = 0.25;
/// Longitudinal force perturbation (N).
pub const FORCE_PERTURBATION: f64 = 800.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Steering,
    Force,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Steering => "steering",
            Channel::Force => "force",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearityRecord {
    pub state_id: usize,
    pub channel: Channel,
    /// +1 or -1.
    pub sign: i8,
    pub eps_lin: f64,
}

/// For every `(state, u_nom)` and channel: the central-difference slope of
/// the previewed barrier about `u_nom`, then `|Δh_actual − J·Δu|` for
/// `±Δu`. `u_nom` is first pulled inside the box so both perturbed inputs
/// stay admissible.
pub fn linearity_analysis(
    m: &DynamicsModel,
    cases: &[(WorldState, ControlInput)],
    fence: &Polygon,
    bounds: &ActuatorBounds,
    cfg: &DcbfConfig,
) -> Vec<LinearityRecord> {
    let mut out = Vec::with_capacity(cases.len() * 4);
    for (id, (x, u)) in cases.iter().enumerate() {
        let u = ControlInput::new(
            u.delta_dot.clamp(
                bounds.delta_dot_min + STEERING_PERTURBATION,
                bounds.delta_dot_max - STEERING_PERTURBATION,
            ),
            u.f_x.clamp(bounds.f_x_min + FORCE_PERTURBATION, bounds.f_x_max - FORCE_PERTURBATION),
        );
        let h = |v: ControlInput| preview_barrier(m, x, &v, fence, cfg);
        let h0 = h(u);
        for (channel, step) in [(Channel::Steering, STEERING_PERTURBATION), (Channel::Force, FORCE_PERTURBATION)] {
            let shifted = |s: f64| match channel {
                Channel::Steering => ControlInput::new(u.delta_dot + s * step, u.f_x),
                Channel::Force => ControlInput::new(u.delta_dot, u.f_x + s * step),
            };
            let hp = h(shifted(1.0));
            let hm = h(shifted(-1.0));
            let j = (hp - hm) / (2.0 * step);
            for (sign, hs) in [(1i8, hp), (-1i8, hm)] {
                let du = sign as f64 * step;
                out.push(LinearityRecord {
                    state_id: id,
                    channel,
                    sign,
                    eps_lin: (hs - h0 - j * du).abs(),
                });
            }
        }
    }
    out
}
