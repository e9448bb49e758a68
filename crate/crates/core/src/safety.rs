//! Preview discrete-CBF safety filter and the max-braking TTC baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ActuatorBounds, ControlInput, WorldState};
use crate::geometry::Polygon;
use crate::integrate::{rk4_step, rollout_zoh, IntegratorScheme};
use crate::models::DynamicsModel;
use crate::qp::{solve_scaled, QpProblem, QpRow, QpStatus};

/// Tolerance below the fence used by the TTC unsafe test (m).
pub const TTC_TOLERANCE: f64 = 0.5;
/// Sampling interval of the TTC braking rollout (s).
pub const TTC_DT: f64 = 0.1;
/// Horizon of the TTC braking rollout (s).
pub const TTC_HORIZON: f64 = 5.0;
/// Closed-loop control period (s).
pub const CONTROL_PERIOD: f64 = 0.02;
/// Force-secant degeneracy threshold (N).
pub const SECANT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SafetyError {
    #[error("invalid DCBF configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcbfConfig {
    pub t_h: f64,
    pub n_sub: usize,
    pub gamma: f64,
    pub h_target: f64,
    pub eps_delta_dot: f64,
    pub gamma_clip: f64,
    /// Second diagonal entry of S (the first is 1).
    pub force_scale: f64,
    pub rho_slack: f64,
    /// Diagonal of Λ in scaled variables.
    pub lambda: [f64; 2],
}

impl Default for DcbfConfig {
    fn default() -> Self {
        Self {
            t_h: 0.30,
            n_sub: 3,
            gamma: 0.4,
            h_target: 0.5,
            eps_delta_dot: 0.25,
            gamma_clip: 1e6,
            force_scale: 1e-3,
            rho_slack: 1e6,
            lambda: [1.0, 1.0],
        }
    }
}

impl DcbfConfig {
    pub fn validate(&self) -> Result<(), SafetyError> {
        let bad = |m: &str| Err(SafetyError::InvalidConfig(m.to_string()));
        if !(self.t_h > 0.0 && self.t_h.is_finite()) {
            return bad("t_h must be positive");
        }
        if self.n_sub == 0 {
            return bad("n_sub must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.h_target >= 0.0 && self.h_target.is_finite()) {
            return bad("h_target must be non-negative");
        }
        if !(self.eps_delta_dot > 0.0) {
            return bad("eps_delta_dot must be positive");
        }
        if !(self.gamma_clip > 0.0) {
            return bad("gamma_clip must be positive");
        }
        if !(self.force_scale > 0.0 && self.rho_slack > 0.0) {
            return bad("force_scale and rho_slack must be positive");
        }
        if !(self.lambda[0] > 0.0 && self.lambda[1] > 0.0) {
            return bad("lambda must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionKind {
    NoIntervention,
    Corrected,
    EmergencyBrake,
}

impl DecisionKind {
    pub fn name(self) -> &'static str {
        match self {
            DecisionKind::NoIntervention => "none",
            DecisionKind::Corrected => "corrected",
            DecisionKind::EmergencyBrake => "emergency_brake",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(DecisionKind::NoIntervention),
            "corrected" => Some(DecisionKind::Corrected),
            "emergency_brake" => Some(DecisionKind::EmergencyBrake),
            _ => None,
        }
    }

    pub fn is_intervention(self) -> bool {
        self != DecisionKind::NoIntervention
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub command: ControlInput,
    pub kind: DecisionKind,
    /// Barrier at the end of the nominal preview.
    pub h_nom: f64,
    pub beta: f64,
    pub jacobian: [f64; 2],
    pub slack_inf_norm: f64,
    /// The force secant had no braking authority left.
    pub degenerate_secant: bool,
}

impl FilterDecision {
    fn passthrough(u: ControlInput, h_nom: f64, beta: f64) -> Self {
        Self {
            command: u,
            kind: DecisionKind::NoIntervention,
            h_nom,
            beta,
            jacobian: [0.0; 2],
            slack_inf_norm: 0.0,
            degenerate_secant: false,
        }
    }
}

pub fn kappa(cfg: &DcbfConfig) -> f64 {
    -(1.0 - cfg.gamma).ln() / cfg.t_h
}

pub fn beta_schedule(h0: f64, tau: f64, cfg: &DcbfConfig) -> f64 {
    cfg.h_target.max(h0 * (-kappa(cfg) * tau).exp())
}

/// Barrier at the end of the semi-implicit preview under constant `u`.
pub fn preview_barrier(
    m: &DynamicsModel,
    x0: &WorldState,
    u: &ControlInput,
    poly: &Polygon,
    cfg: &DcbfConfig,
) -> f64 {
    let x = rollout_zoh(m, x0, u, cfg.t_h, cfg.n_sub, IntegratorScheme::SemiImplicitEuler);
    poly.signed_distance(x.position())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierJacobian {
    pub j: [f64; 2],
    pub h_nom: f64,
    pub degenerate_secant: bool,
}

/// Saturation-aware barrier sensitivities at the preview horizon: clamped
/// central (or one-sided) differences in steering rate and a secant toward
/// full braking in force, both clipped to `±gamma_clip`.
pub fn barrier_jacobian(
    m: &DynamicsModel,
    x0: &WorldState,
    u_nom: &ControlInput,
    bounds: &ActuatorBounds,
    poly: &Polygon,
    cfg: &DcbfConfig,
) -> BarrierJacobian {
    let h = |u: ControlInput| preview_barrier(m, x0, &u, poly, cfg);
    let h_nom = h(*u_nom);
    jacobian_with_nominal(&h, h_nom, u_nom, bounds, cfg)
}

fn jacobian_with_nominal(
    h: &dyn Fn(ControlInput) -> f64,
    h_nom: f64,
    u_nom: &ControlInput,
    bounds: &ActuatorBounds,
    cfg: &DcbfConfig,
) -> BarrierJacobian {
    let clip_dd = |v: f64| v.max(bounds.delta_dot_min).min(bounds.delta_dot_max);
    let dd_plus = clip_dd(u_nom.delta_dot + cfg.eps_delta_dot);
    let dd_minus = clip_dd(u_nom.delta_dot - cfg.eps_delta_dot);
    let with_dd = |dd: f64| ControlInput::new(dd, u_nom.f_x);
    let j_steer = if dd_plus > dd_minus {
        (h(with_dd(dd_plus)) - h(with_dd(dd_minus))) / (dd_plus - dd_minus)
    } else if dd_minus <= bounds.delta_dot_min {
        // Both perturbations sit on the lower bound.
        (h_nom - h(with_dd(dd_minus))) / (u_nom.delta_dot - dd_minus)
    } else {
        (h(with_dd(dd_plus)) - h_nom) / (dd_plus - u_nom.delta_dot)
    };
    let span = bounds.f_x_min - u_nom.f_x;
    let (j_force, degenerate_secant) = if span.abs() <= SECANT_EPS {
        (0.0, true)
    } else {
        let h_brk = h(ControlInput::new(u_nom.delta_dot, bounds.f_x_min));
        ((h_brk - h_nom) / span, false)
    };
    let clip = |v: f64| {
        if v.is_finite() {
            v.clamp(-cfg.gamma_clip, cfg.gamma_clip)
        } else {
            0.0
        }
    };
    BarrierJacobian {
        j: [clip(j_steer), clip(j_force)],
        h_nom,
        degenerate_secant,
    }
}

/// Runtime filter: early exit when the nominal preview meets the schedule,
/// otherwise a minimal-deviation QP on the linearized terminal barrier, with
/// an emergency brake if the QP fails.
pub fn dcbf_filter(
    m: &DynamicsModel,
    x0: &WorldState,
    u_nom: &ControlInput,
    bounds: &ActuatorBounds,
    poly: &Polygon,
    cfg: &DcbfConfig,
) -> FilterDecision {
    let h = |u: ControlInput| preview_barrier(m, x0, &u, poly, cfg);
    let h_nom = h(*u_nom);
    let beta = beta_schedule(poly.signed_distance(x0.position()), cfg.t_h, cfg);
    if h_nom >= beta {
        return FilterDecision::passthrough(*u_nom, h_nom, beta);
    }
    let jac = jacobian_with_nominal(&h, h_nom, u_nom, bounds, cfg);
    let j = jac.j;
    let problem = QpProblem {
        u_nom: u_nom.to_array(),
        w: [
            cfg.lambda[0],
            cfg.lambda[1] * cfg.force_scale * cfg.force_scale,
        ],
        rho: cfg.rho_slack,
        rows: vec![QpRow {
            a: j,
            b: beta - h_nom + j[0] * u_nom.delta_dot + j[1] * u_nom.f_x,
        }],
        u_min: bounds.lower(),
        u_max: bounds.upper(),
    };
    let sol = solve_scaled(&problem, [1.0, cfg.force_scale], cfg.lambda);
    if sol.status == QpStatus::NumericalFailure {
        return FilterDecision {
            command: bounds.emergency_brake(),
            kind: DecisionKind::EmergencyBrake,
            h_nom,
            beta,
            jacobian: j,
            slack_inf_norm: 0.0,
            degenerate_secant: jac.degenerate_secant,
        };
    }
    FilterDecision {
        command: ControlInput::from_array(sol.u_star),
        kind: DecisionKind::Corrected,
        h_nom,
        beta,
        jacobian: j,
        slack_inf_norm: sol.slack_inf_norm(),
        degenerate_secant: jac.degenerate_secant,
    }
}

/// True when a maximum-braking RK4 rollout from `x0`, sampled every 0.1 s up
/// to 5 s and stopped at the first non-positive forward speed, dips more
/// than 0.5 m outside the fence.
pub fn ttc_unsafe(m: &DynamicsModel, x0: &WorldState, bounds: &ActuatorBounds, poly: &Polygon) -> bool {
    let u = bounds.emergency_brake();
    let steps = (TTC_HORIZON / TTC_DT).round() as usize;
    let mut x = *x0;
    for k in 0..=steps {
        if poly.signed_distance(x.position()) < -TTC_TOLERANCE {
            return true;
        }
        if x.body.v_x <= 0.0 || k == steps {
            break;
        }
        x = rk4_step(m, &x, &u, TTC_DT);
    }
    false
}

/// Last-moment TTC baseline: brake now if the state one control period
/// ahead under the nominal input fails [`ttc_unsafe`].
pub fn ttc_controller(
    m: &DynamicsModel,
    x0: &WorldState,
    u_nom: &ControlInput,
    bounds: &ActuatorBounds,
    poly: &Polygon,
) -> FilterDecision {
    let x1 = rk4_step(m, x0, u_nom, CONTROL_PERIOD);
    let h0 = poly.signed_distance(x0.position());
    if ttc_unsafe(m, &x1, bounds, poly) {
        FilterDecision {
            command: bounds.emergency_brake(),
            kind: DecisionKind::EmergencyBrake,
            h_nom: h0,
            beta: 0.0,
            jacobian: [0.0; 2],
            slack_inf_norm: 0.0,
            degenerate_secant: false,
        }
    } else {
        FilterDecision::passthrough(*u_nom, h0, 0.0)
    }
}
