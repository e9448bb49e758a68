//! Closed-loop episode execution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{Label, Regime, Scenario};
use super::{Plant, PlantState};
use crate::dynamics::{ActuatorBounds, ControlInput, WorldState};
use crate::models::DynamicsModel;
use crate::safety::{dcbf_filter, ttc_controller, DcbfConfig, DecisionKind, FilterDecision, CONTROL_PERIOD};

#[derive(Debug, Clone)]
pub enum Controller {
    /// Always applies the nominal input.
    Null,
    Dcbf { model: DynamicsModel, cfg: DcbfConfig },
    Ttc { model: DynamicsModel },
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Null => "null",
            Controller::Dcbf { .. } => "dcbf",
            Controller::Ttc { .. } => "ttc",
        }
    }

    pub fn decide(
        &self,
        x: &WorldState,
        u_nom: &ControlInput,
        bounds: &ActuatorBounds,
        sc: &Scenario,
    ) -> FilterDecision {
        match self {
            Controller::Null => {
                let h = sc.fence.signed_distance(x.position());
                FilterDecision {
                    command: *u_nom,
                    kind: DecisionKind::NoIntervention,
                    h_nom: h,
                    beta: f64::NAN,
                    jacobian: [0.0; 2],
                    slack_inf_norm: 0.0,
                    degenerate_secant: false,
                }
            }
            Controller::Dcbf { model, cfg } => dcbf_filter(model, x, u_nom, bounds, &sc.fence, cfg),
            Controller::Ttc { model } => ttc_controller(model, x, u_nom, bounds, &sc.fence),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Main,
    /// Forced braking after the time limit.
    Tail,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Tail => "tail",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "main" => Some(Phase::Main),
            "tail" => Some(Phase::Tail),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub t: f64,
    pub state: WorldState,
    pub u_nom: ControlInput,
    pub u_applied: ControlInput,
    pub kind: DecisionKind,
    /// Barrier at the current state.
    pub h: f64,
    pub h_nom: f64,
    pub beta: f64,
    pub jacobian: [f64; 2],
    pub slack_inf_norm: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scenario_id: usize,
    pub label: Label,
    pub regime: Regime,
    /// Minimum barrier over every visited state, including the final one.
    pub min_sdf: f64,
    pub breach: bool,
    pub intervened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub rows: Vec<EpisodeRow>,
    pub summary: EpisodeSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_t: f64,
    /// Abort once the car is this far outside (m).
    pub breach_abort: f64,
    /// Forward speed regarded as stopped (m/s).
    pub rest_speed: f64,
    /// Longest forced-braking tail (s).
    pub tail_max_t: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_t: 20.0,
            breach_abort: 5.0,
            rest_speed: 0.01,
            tail_max_t: 30.0,
        }
    }
}

/// Runs one episode at the fixed control period. The controller sees the
/// exact plant state. The episode ends at `max_t`, at rest after an
/// intervention, or after a breach deeper than `breach_abort`; reaching
/// `max_t` adds a full-braking tail until rest.
pub fn run_episode(
    controller: &Controller,
    plant: &Plant,
    sc: &Scenario,
    bounds: &ActuatorBounds,
    cfg: &EpisodeConfig,
) -> EpisodeLog {
    let fence = &sc.fence;
    let mut s = PlantState::at_rest(sc.x0);
    let mut rows = Vec::new();
    let mut min_sdf = fence.signed_distance(sc.x0.position());
    let mut intervened = false;
    let n_main = (cfg.max_t / CONTROL_PERIOD).round() as usize;
    let mut k = 0usize;
    let mut aborted = false;
    while k < n_main {
        let t = k as f64 * CONTROL_PERIOD;
        let u_nom = sc.policy.command(t, bounds);
        let d = controller.decide(&s.world, &u_nom, bounds, sc);
        intervened |= d.kind.is_intervention();
        rows.push(EpisodeRow {
            t,
            state: s.world,
            u_nom,
            u_applied: d.command,
            kind: d.kind,
            h: fence.signed_distance(s.world.position()),
            h_nom: d.h_nom,
            beta: d.beta,
            jacobian: d.jacobian,
            slack_inf_norm: d.slack_inf_norm,
            phase: Phase::Main,
        });
        s = plant.advance(&s, &d.command, CONTROL_PERIOD);
        k += 1;
        let h = fence.signed_distance(s.world.position());
        min_sdf = min_sdf.min(h);
        if h < -cfg.breach_abort {
            aborted = true;
            break;
        }
        if intervened && s.world.body.v_x <= cfg.rest_speed {
            aborted = true;
            break;
        }
    }
    if !aborted {
        let eb = bounds.emergency_brake();
        let n_tail = (cfg.tail_max_t / CONTROL_PERIOD).round() as usize;
        for j in 0..n_tail {
            if s.world.body.v_x <= cfg.rest_speed {
                break;
            }
            rows.push(EpisodeRow {
                t: (k + j) as f64 * CONTROL_PERIOD,
                state: s.world,
                u_nom: eb,
                u_applied: eb,
                kind: DecisionKind::EmergencyBrake,
                h: fence.signed_distance(s.world.position()),
                h_nom: f64::NAN,
                beta: f64::NAN,
                jacobian: [0.0; 2],
                slack_inf_norm: 0.0,
                phase: Phase::Tail,
            });
            s = plant.advance(&s, &eb, CONTROL_PERIOD);
            let h = fence.signed_distance(s.world.position());
            min_sdf = min_sdf.min(h);
            if h < -cfg.breach_abort {
                break;
            }
        }
    }
    EpisodeLog {
        rows,
        summary: EpisodeSummary {
            scenario_id: sc.id,
            label: sc.label,
            regime: sc.regime,
            min_sdf,
            breach: min_sdf < 0.0,
            intervened,
        },
    }
}

/// Runs all scenarios in parallel; output order follows the input.
pub fn run_episodes(
    controller: &Controller,
    plant: &Plant,
    scenarios: &[Scenario],
    bounds: &ActuatorBounds,
    cfg: &EpisodeConfig,
) -> Vec<EpisodeLog> {
    scenarios
        .par_iter()
        .map(|sc| run_episode(controller, plant, sc, bounds, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BodyState, VehicleParams};
    use crate::geometry::Polygon;
    use crate::harness::policy::{ForceProfile, NominalPolicy, SteeringProfile};
    use crate::harness::PlantConfig;

    fn straight(x0: WorldState, force: f64) -> Scenario {
        Scenario {
            id: 0,
            x0,
            fence: Polygon::rectangle(0.0, 0.0, 100.0, 100.0).unwrap(),
            policy: NominalPolicy {
                steering: SteeringProfile::ConstantRate { rate: 0.0, duration: 0.0 },
                force: ForceProfile::Constant { force },
            },
            label: Label::Safe,
            regime: Regime::HighStraight,
        }
    }

    #[test]
    fn times_increase_by_control_period() {
        let plant = Plant::new(PlantConfig::matched(VehicleParams::default())).unwrap();
        let sc = straight(WorldState::new(10.0, 50.0, 0.0, BodyState::new(5.0, 0.0, 0.0, 0.0)), -300.0);
        let log = run_episode(
            &Controller::Null,
            &plant,
            &sc,
            &ActuatorBounds::default(),
            &EpisodeConfig::default(),
        );
        for w in log.rows.windows(2) {
            assert!((w[1].t - w[0].t - CONTROL_PERIOD).abs() < 1e-9);
        }
        assert!(!log.summary.breach && !log.summary.intervened);
    }

    #[test]
    fn null_controller_breaches_head_on() {
        let plant = Plant::new(PlantConfig::matched(VehicleParams::default())).unwrap();
        let sc = straight(WorldState::new(50.0, 50.0, 0.0, BodyState::new(20.0, 0.0, 0.0, 0.0)), 0.0);
        let log = run_episode(
            &Controller::Null,
            &plant,
            &sc,
            &ActuatorBounds::default(),
            &EpisodeConfig::default(),
        );
        assert!(log.summary.breach);
        assert!(log.summary.min_sdf < -5.0);
        assert!(log.rows.iter().all(|r| r.phase == Phase::Main));
    }

    #[test]
    fn tail_brakes_to_rest() {
        let plant = Plant::new(PlantConfig::matched(VehicleParams::default())).unwrap();
        let sc = straight(WorldState::new(1.0, 50.0, 0.0, BodyState::new(1.0, 0.0, 0.0, 0.0)), 200.0);
        let cfg = EpisodeConfig {
            max_t: 1.0,
            ..Default::default()
        };
        let log = run_episode(&Controller::Null, &plant, &sc, &ActuatorBounds::default(), &cfg);
        let tail: Vec<_> = log.rows.iter().filter(|r| r.phase == Phase::Tail).collect();
        assert!(!tail.is_empty());
        assert!(!log.summary.intervened);
    }

    #[test]
    fn dcbf_stops_short_of_wall() {
        let p = VehicleParams::default();
        let plant = Plant::new(PlantConfig::matched(p)).unwrap();
        let sc = straight(WorldState::new(70.0, 50.0, 0.0, BodyState::new(8.0, 0.0, 0.0, 0.0)), 500.0);
        let ctl = Controller::Dcbf {
            model: DynamicsModel::Analytical(p),
            cfg: DcbfConfig::default(),
        };
        let log = run_episode(&ctl, &plant, &sc, &ActuatorBounds::default(), &EpisodeConfig::default());
        assert!(log.summary.intervened);
        assert!(log.summary.min_sdf >= -0.5, "{}", log.summary.min_sdf);
        for r in &log.rows {
            if r.kind == DecisionKind::NoIntervention {
                assert_eq!(r.u_applied, r.u_nom);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let p = VehicleParams::default();
        let plant = Plant::new(PlantConfig::matched(p)).unwrap();
        let scs: Vec<_> = (0..6)
            .map(|i| {
                let mut s = straight(
                    WorldState::new(40.0 + 5.0 * i as f64, 50.0, 0.1 * i as f64, BodyState::new(10.0, 0.0, 0.0, 0.0)),
                    300.0,
                );
                s.id = i;
                s
            })
            .collect();
        let ctl = Controller::Ttc {
            model: DynamicsModel::Analytical(p),
        };
        let b = ActuatorBounds::default();
        let cfg = EpisodeConfig::default();
        let par = run_episodes(&ctl, &plant, &scs, &b, &cfg);
        for (sc, log) in scs.iter().zip(&par) {
            assert_eq!(format!("{log:?}"), format!("{:?}", run_episode(&ctl, &plant, sc, &b, &cfg)));
        }
    }
}
