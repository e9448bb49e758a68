//! Synthetic plant, scenarios, closed-loop episodes and evaluation metrics.

mod episode;
mod linearity;
mod metrics;
mod policy;
mod scenario;

pub use episode::{
    run_episode, run_episodes, Controller, EpisodeConfig, EpisodeLog, EpisodeRow, EpisodeSummary, Phase,
};
pub use linearity::{linearity_analysis, Channel, LinearityRecord, FORCE_PERTURBATION, STEERING_PERTURBATION};
pub use metrics::{compute_metrics, median, Confusion, Metrics, MetricsReport};
pub use policy::{sample_policy, FamilyMix, ForceProfile, NominalPolicy, SteeringProfile};
pub use scenario::{
    generate_scenarios, panic_brake_solvable, Label, Regime, Scenario, ScenarioConfig, SHARP_STEER_THRESHOLD,
    SPEED_THRESHOLD,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{derivative, BodyState, ControlInput, DynamicsError, VehicleParams, WorldState};
use crate::integrate::{pose_augmented, rk4_generic};
use crate::models::DynamicsModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("invalid plant: {0}")]
    InvalidPlant(String),
    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),
    #[error("scenario sampling exhausted after {rejected} rejections ({accepted} accepted)")]
    SamplingExhausted { accepted: usize, rejected: usize },
    #[error("no episodes")]
    NoEpisodes,
}

impl From<DynamicsError> for HarnessError {
    fn from(e: DynamicsError) -> Self {
        HarnessError::InvalidPlant(e.to_string())
    }
}

/// Multiplicative factors applied to the base parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamFactors {
    pub m: f64,
    pub i_z: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub c_f: f64,
    pub c_r: f64,
    pub mu: f64,
    pub c_shape: f64,
    pub e_curv: f64,
}

impl Default for ParamFactors {
    fn default() -> Self {
        Self {
            m: 1.0,
            i_z: 1.0,
            l_f: 1.0,
            l_r: 1.0,
            c_f: 1.0,
            c_r: 1.0,
            mu: 1.0,
            c_shape: 1.0,
            e_curv: 1.0,
        }
    }
}

impl ParamFactors {
    pub fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("m", self.m),
            ("i_z", self.i_z),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("c_f", self.c_f),
            ("c_r", self.c_r),
            ("mu", self.mu),
            ("c_shape", self.c_shape),
            ("e_curv", self.e_curv),
        ]
    }

    pub fn apply(&self, p: &VehicleParams) -> VehicleParams {
        VehicleParams {
            m: p.m * self.m,
            i_z: p.i_z * self.i_z,
            l_f: p.l_f * self.l_f,
            l_r: p.l_r * self.l_r,
            c_f: p.c_f * self.c_f,
            c_r: p.c_r * self.c_r,
            mu: p.mu * self.mu,
            c_shape: p.c_shape * self.c_shape,
            e_curv: p.e_curv * self.e_curv,
            ..*p
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub base: VehicleParams,
    pub factors: ParamFactors,
    /// Quadratic longitudinal drag (N s²/m²).
    pub drag_coeff: f64,
    /// First-order lag on the steering-rate command (s); 0 disables.
    pub steering_lag_tau: f64,
    /// RK4 steps per control period in [`Plant::advance`].
    pub substeps: usize,
}

impl Default for PlantConfig {
    /// The mismatched plant: drag 0.4, lag 0.05 s, front stiffness +10%.
    fn default() -> Self {
        Self {
            base: VehicleParams::default(),
            factors: ParamFactors {
                c_f: 1.1,
                ..Default::default()
            },
            drag_coeff: 0.4,
            steering_lag_tau: 0.05,
            substeps: 4,
        }
    }
}

impl PlantConfig {
    /// Plant identical to the analytical model with `base`.
    pub fn matched(base: VehicleParams) -> Self {
        Self {
            base,
            factors: ParamFactors::default(),
            drag_coeff: 0.0,
            steering_lag_tau: 0.0,
            substeps: 4,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        for (name, f) in self.factors.named() {
            if !(0.5..=2.0).contains(&f) {
                return Err(HarnessError::InvalidPlant(format!("factor {name}={f} outside [0.5, 2]")));
            }
        }
        if !(self.drag_coeff >= 0.0 && self.drag_coeff.is_finite()) {
            return Err(HarnessError::InvalidPlant("drag_coeff must be non-negative".into()));
        }
        if !(self.steering_lag_tau >= 0.0 && self.steering_lag_tau.is_finite()) {
            return Err(HarnessError::InvalidPlant("steering_lag_tau must be non-negative".into()));
        }
        if self.substeps == 0 {
            return Err(HarnessError::InvalidPlant("substeps must be at least 1".into()));
        }
        self.factors.apply(&self.base).validate()?;
        Ok(())
    }

    pub fn effective_params(&self) -> VehicleParams {
        self.factors.apply(&self.base)
    }
}

/// Plant state: the world state plus the lagged steering rate actually
/// reaching the rack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub world: WorldState,
    pub delta_dot_eff: f64,
}

impl PlantState {
    pub fn at_rest(world: WorldState) -> Self {
        Self {
            world,
            delta_dot_eff: 0.0,
        }
    }
}

/// Ground-truth vehicle all controllers are evaluated against.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    params: VehicleParams,
}

impl Plant {
    pub fn new(cfg: PlantConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        Ok(Self {
            params: cfg.effective_params(),
            cfg,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    /// The analytical model with the plant's true parameters.
    pub fn matched_model(&self) -> DynamicsModel {
        DynamicsModel::Analytical(self.params)
    }

    fn body_derivative(&self, x: &[f64], u: &ControlInput) -> [f64; 4] {
        let body = BodyState::new(x[3], x[4], x[5], x[6]);
        let mut d = derivative(&body, u, &self.params);
        if self.cfg.drag_coeff != 0.0 {
            d[0] -= self.cfg.drag_coeff * x[3] * x[3].abs() / self.params.m;
        }
        d
    }

    /// Time derivative of `(v_x, v_y, ω, δ)` under command `u`.
    pub fn body_rates(&self, s: &PlantState, u: &ControlInput) -> [f64; 4] {
        let rate = if self.cfg.steering_lag_tau > 0.0 {
            s.delta_dot_eff
        } else {
            u.delta_dot
        };
        self.body_derivative(&s.world.to_array(), &ControlInput::new(rate, u.f_x))
    }

    /// One RK4 step. Braking never reverses the car: a step that would take
    /// `v_x` below zero under `F_x <= 0` ends at rest.
    pub fn step(&self, s: &PlantState, u: &ControlInput, dt: f64) -> PlantState {
        let b = &s.world.body;
        if u.f_x <= 0.0 && b.v_x <= 0.0 && b.v_y == 0.0 && b.omega == 0.0 {
            return self.parked_step(s, u, dt);
        }
        let mut out = if self.cfg.steering_lag_tau > 0.0 {
            let tau = self.cfg.steering_lag_tau;
            let w = s.world.to_array();
            let x = [w[0], w[1], w[2], w[3], w[4], w[5], w[6], s.delta_dot_eff];
            let next = rk4_generic(&x, dt, |x| {
                let eff = ControlInput::new(x[7], u.f_x);
                let w = [x[0], x[1], x[2], x[3], x[4], x[5], x[6]];
                let d = pose_augmented(&w, self.body_derivative(x, &eff));
                [d[0], d[1], d[2], d[3], d[4], d[5], d[6], (u.delta_dot - x[7]) / tau]
            });
            PlantState {
                world: WorldState::from_array([next[0], next[1], next[2], next[3], next[4], next[5], next[6]]),
                delta_dot_eff: next[7],
            }
        } else {
            let next = rk4_generic(&s.world.to_array(), dt, |x| pose_augmented(x, self.body_derivative(x, u)));
            PlantState {
                world: WorldState::from_array(next),
                delta_dot_eff: u.delta_dot,
            }
        };
        if u.f_x <= 0.0 && out.world.body.v_x < 0.0 {
            out.world.body.v_x = 0.0;
            out.world.body.v_y = 0.0;
            out.world.body.omega = 0.0;
        }
        out
    }

    /// Stationary under braking: only the steering moves.
    fn parked_step(&self, s: &PlantState, u: &ControlInput, dt: f64) -> PlantState {
        let tau = self.cfg.steering_lag_tau;
        let (rate, eff) = if tau > 0.0 {
            let decay = (-dt / tau).exp();
            let eff = u.delta_dot + (s.delta_dot_eff - u.delta_dot) * decay;
            // Exact integral of the lagged rate over the step.
            (u.delta_dot + (s.delta_dot_eff - u.delta_dot) * tau * (1.0 - decay) / dt, eff)
        } else {
            (u.delta_dot, u.delta_dot)
        };
        let mut world = s.world;
        world.body = BodyState::new(0.0, 0.0, 0.0, world.body.delta + dt * rate);
        PlantState {
            world,
            delta_dot_eff: eff,
        }
    }

    /// Advances one control period in `substeps` equal RK4 steps.
    pub fn advance(&self, s: &PlantState, u: &ControlInput, period: f64) -> PlantState {
        let n = self.cfg.substeps.max(1);
        let dt = period / n as f64;
        let mut x = *s;
        for _ in 0..n {
            x = self.step(&x, u, dt);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::rk4_step;

    #[test]
    fn matched_plant_reduces_to_rk4() {
        let p = VehicleParams::default();
        let plant = Plant::new(PlantConfig::matched(p)).unwrap();
        let m = DynamicsModel::Analytical(p);
        let x = WorldState::new(3.0, -2.0, 0.4, BodyState::new(14.0, 0.3, 0.1, 0.05));
        for u in [ControlInput::new(0.3, 1500.0), ControlInput::new(-0.8, -6000.0)] {
            let a = plant.step(&PlantState::at_rest(x), &u, 0.02).world;
            assert_eq!(a, rk4_step(&m, &x, &u, 0.02));
        }
    }

    #[test]
    fn drag_dissipates() {
        let plant = Plant::new(PlantConfig {
            drag_coeff: 0.4,
            ..PlantConfig::matched(VehicleParams::default())
        })
        .unwrap();
        let mut s = PlantState::at_rest(WorldState::new(0.0, 0.0, 0.0, BodyState::new(30.0, 0.0, 0.0, 0.0)));
        for _ in 0..200 {
            let next = plant.advance(&s, &ControlInput::default(), 0.02);
            assert!(next.world.body.v_x < s.world.body.v_x);
            s = next;
        }
    }

    #[test]
    fn steering_lag_first_order_response() {
        let tau = 0.05;
        let plant = Plant::new(PlantConfig {
            steering_lag_tau: tau,
            ..PlantConfig::matched(VehicleParams::default())
        })
        .unwrap();
        let u = ControlInput::new(1.0, 0.0);
        let mut s = PlantState::at_rest(WorldState::new(0.0, 0.0, 0.0, BodyState::new(10.0, 0.0, 0.0, 0.0)));
        let dt = 0.001;
        let mut t = 0.0;
        while s.delta_dot_eff < 0.95 {
            s = plant.step(&s, &u, dt);
            t += dt;
        }
        assert!((t - 3.0 * tau).abs() <= 0.1 * 3.0 * tau, "t95 = {t}");
    }

    #[test]
    fn braking_stops_at_rest() {
        let plant = Plant::new(PlantConfig::matched(VehicleParams::default())).unwrap();
        let mut s = PlantState::at_rest(WorldState::new(0.0, 0.0, 0.0, BodyState::new(2.0, 0.0, 0.0, 0.0)));
        for _ in 0..100 {
            s = plant.advance(&s, &ControlInput::new(0.0, -11979.0), 0.02);
            assert!(s.world.body.v_x >= 0.0);
        }
        assert_eq!(s.world.body.v_x, 0.0);
        let p = s.world.p_x;
        let s2 = plant.advance(&s, &ControlInput::new(0.0, -11979.0), 0.02);
        assert_eq!(s2.world.p_x, p);
    }

    #[test]
    fn factor_bounds_enforced() {
        let mut cfg = PlantConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.factors.m = 2.5;
        assert!(matches!(cfg.validate(), Err(HarnessError::InvalidPlant(_))));
        cfg.factors.m = 1.0;
        cfg.factors.e_curv = 1.5;
        assert!(cfg.validate().is_err());
    }
}
