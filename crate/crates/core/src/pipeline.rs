//! Command implementations shared by the CLI and the end-to-end tests.
//!
//! Output directory layout:
//! `raw/traj_NNNN.csv`, `manifest.csv`, `dataset.csv` (generate);
//! `calibrated.ini`, `calibration_history.csv` (calibrate);
//! weights file, `loss_curve.csv`, `train_report.txt` (train);
//! `episodes/episode_NNNN.csv`, `episodes/summary.csv` (simulate);
//! `metrics.csv`, `metrics.txt` (evaluate); `linearity.csv` (linearity).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{derive_seed, ConfigError, ControllerKind, DatasetConfig, ModelSource, RunConfig};
use crate::dynamics::{ActuatorBounds, BodyState, ControlInput, VehicleParams, WorldState};
use crate::harness::{
    compute_metrics, generate_scenarios, linearity_analysis, run_episodes, sample_policy, Controller, HarnessError,
    LinearityRecord, MetricsReport, Plant, PlantState,
};
use crate::io::{self, IoError, ManifestRow, ProcessedRow};
use crate::models::{load_weights, save_weights, DynamicsModel, ModelError, ModelKind};
use crate::safety::CONTROL_PERIOD;
use crate::training::{
    calibrate_params, derivative_rmse, stratified_split_indices, train_residuals, Dataset, SpeedBucket, Stratum,
    TrainError, Trajectory, ValidationSet,
};

pub const RAW_DIR: &str = "raw";
pub const MANIFEST: &str = "manifest.csv";
pub const DATASET: &str = "dataset.csv";
pub const CALIBRATED: &str = "calibrated.ini";
pub const CALIBRATION_HISTORY: &str = "calibration_history.csv";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const TRAIN_REPORT: &str = "train_report.txt";
pub const EPISODES_DIR: &str = "episodes";
pub const SUMMARY: &str = "summary.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const LINEARITY: &str = "linearity.csv";

/// Train / validation / test fractions.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.75, 0.125, 0.125];
const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
/// Shortest accepted training trajectory (samples).
const MIN_TRAJECTORY_LEN: usize = 25;
const POLICY_ATTEMPTS: usize = 100;
/// Realism filter: largest accepted RMS gap between finite-difference labels
/// and true plant rates. Rollouts whose motion the 0.02 s sampling cannot
/// resolve (fast steering near standstill, force steps) are resampled.
pub const LABEL_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Fs(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("missing prerequisite: {0}")]
    Missing(String),
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 I/O, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Harness(_) => 2,
            PipelineError::Io(_) | PipelineError::Fs(_) | PipelineError::Missing(_) => 3,
            PipelineError::Model(ModelError::Io(_))
            | PipelineError::Model(ModelError::BadMagic)
            | PipelineError::Model(ModelError::Truncated)
            | PipelineError::Model(ModelError::UnknownVariant(_)) => 3,
            PipelineError::Model(_) => 2,
            PipelineError::Train(TrainError::DivergedLoss { .. }) => 4,
            PipelineError::Train(_) => 2,
        }
    }
}

fn mkdir(p: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(p).map_err(|e| PipelineError::Fs(format!("{}: {e}", p.display())))
}

fn write_text(p: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(p, text).map_err(|e| PipelineError::Fs(format!("{}: {e}", p.display())))
}

/// Plant rollouts from the dataset families. Each trajectory starts at
/// `start` with a random heading, cycles through the configured speeds and
/// stops just before the car comes to rest under braking. Policies are
/// redrawn until the rollout passes the realism filter; after
/// `POLICY_ATTEMPTS` the most consistent rollout is kept.
pub fn generate_trajectories(
    plant: &Plant,
    ds: &DatasetConfig,
    bounds: &ActuatorBounds,
    start: (f64, f64),
    seed: u64,
) -> Result<Vec<Trajectory>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (ds.duration / CONTROL_PERIOD).round() as usize;
    let mut out = Vec::with_capacity(ds.n);
    for i in 0..ds.n {
        let v0 = ds.speeds[i % ds.speeds.len()];
        let mut best: Option<(bool, f64, Trajectory)> = None;
        for _ in 0..POLICY_ATTEMPTS {
            let psi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let policy = sample_policy(&mut rng, &ds.mix, ds.duration);
            let x0 = WorldState::new(start.0, start.1, psi, BodyState::new(v0, 0.0, 0.0, 0.0));
            let mut s = PlantState::at_rest(x0);
            let mut truth = Vec::with_capacity(steps + 1);
            let mut t = Trajectory {
                stratum: Stratum {
                    steering: policy.steering.family(),
                    force: policy.force.family(),
                    speed: SpeedBucket::of(v0),
                },
                times: Vec::with_capacity(steps + 1),
                states: Vec::with_capacity(steps + 1),
                controls: Vec::with_capacity(steps + 1),
            };
            for k in 0..=steps {
                let time = k as f64 * CONTROL_PERIOD;
                let u = policy.command(time, bounds);
                t.times.push(time);
                t.states.push(s.world);
                t.controls.push(u);
                truth.push(plant.body_rates(&s, &u));
                if k == steps {
                    break;
                }
                s = plant.advance(&s, &u, CONTROL_PERIOD);
                if u.f_x <= 0.0 && s.world.body.v_x <= 0.0 {
                    break;
                }
            }
            let short = t.len() < MIN_TRAJECTORY_LEN;
            let err = label_error(&t, &truth);
            if !short && err <= LABEL_TOLERANCE {
                best = Some((short, err, t));
                break;
            }
            if best.as_ref().is_none_or(|(bs, be, _)| (short, err) < (*bs, *be)) {
                best = Some((short, err, t));
            }
        }
        let (_, _, t) = best.expect("at least one attempt");
        if t.len() < 3 {
            return Err(PipelineError::Train(TrainError::TooFewSamples(t.len())));
        }
        out.push(t);
    }
    Ok(out)
}

/// Largest gap between finite-difference labels and the plant's own rates
/// over the body-velocity components.
pub fn label_error(t: &Trajectory, truth: &[[f64; 4]]) -> f64 {
    let Ok(samples) = t.samples() else {
        return f64::INFINITY;
    };
    let sq: f64 = samples
        .iter()
        .zip(truth)
        .flat_map(|(s, r)| (0..3).map(move |i| (s.xdot_gt[i] - r[i]).powi(2)))
        .sum();
    (sq / (3 * samples.len()) as f64).sqrt()
}

/// Generated data loaded back from disk.
#[derive(Debug, Clone)]
pub struct Generated {
    pub trajectories: Vec<Trajectory>,
    /// Trajectory indices of the train, validation and test splits.
    pub splits: [Vec<usize>; 3],
}

impl Generated {
    pub fn dataset(&self, split: usize) -> Result<Dataset, TrainError> {
        let mut d = Dataset::default();
        for &i in &self.splits[split] {
            let t = &self.trajectories[i];
            d.push_all(&t.samples()?, t.stratum);
        }
        Ok(d)
    }

    pub fn split_trajectories(&self, split: usize) -> Vec<Trajectory> {
        self.splits[split].iter().map(|&i| self.trajectories[i].clone()).collect()
    }
}

/// Originals followed by their reflections about `y = axis_y`, with mirrors
/// placed in the split of their source so no near-duplicate crosses splits.
pub fn mirror_and_split(originals: Vec<Trajectory>, axis_y: f64, seed: u64) -> Result<Generated, TrainError> {
    let n = originals.len();
    let strata: Vec<Stratum> = originals.iter().map(|t| t.stratum).collect();
    let base = stratified_split_indices(&strata, SPLIT_FRACTIONS, seed)?;
    let mut trajectories = originals;
    let mirrors: Vec<Trajectory> = trajectories.iter().map(|t| t.mirrored_about(axis_y)).collect();
    trajectories.extend(mirrors);
    let splits = base.map(|idx| {
        let mut v: Vec<usize> = idx.iter().flat_map(|&i| [i, i + n]).collect();
        v.sort_unstable();
        v
    });
    Ok(Generated { trajectories, splits })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub trajectories: usize,
    pub samples: usize,
    pub split_sizes: [usize; 3],
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary, PipelineError> {
    let plant = Plant::new(cfg.plant)?;
    let (x0, y0, x1, y1) = cfg.fence.bounding_box();
    let center = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let originals =
        generate_trajectories(&plant, &cfg.dataset, &cfg.bounds, center, derive_seed(cfg.seed, "dataset"))?;
    let n = originals.len();
    let g = mirror_and_split(originals, center.1, derive_seed(cfg.seed, "split"))?;
    let raw = cfg.output.join(RAW_DIR);
    mkdir(&raw)?;
    let mut split_of = vec![0usize; g.trajectories.len()];
    for (s, idx) in g.splits.iter().enumerate() {
        for &i in idx {
            split_of[i] = s;
        }
    }
    let mut manifest = Vec::with_capacity(g.trajectories.len());
    let mut processed = Vec::new();
    for (i, t) in g.trajectories.iter().enumerate() {
        let file = format!("{RAW_DIR}/traj_{i:04}.csv");
        io::write_trajectory(&cfg.output.join(&file), t)?;
        manifest.push(ManifestRow {
            trajectory: i,
            file,
            mirror_of: (i >= n).then(|| i - n),
            stratum: t.stratum.name(),
            split: SPLIT_NAMES[split_of[i]].into(),
        });
        for ((s, x), &time) in t.samples()?.iter().zip(&t.states).zip(&t.times) {
            processed.push(ProcessedRow::new(i, time, x, s));
        }
    }
    io::write_rows(&cfg.output.join(MANIFEST), &manifest)?;
    io::write_rows(&cfg.output.join(DATASET), &processed)?;
    Ok(GenerateSummary {
        trajectories: g.trajectories.len(),
        samples: processed.len(),
        split_sizes: g.splits.clone().map(|s| s.len()),
    })
}

pub fn load_generated(out: &Path) -> Result<Generated, PipelineError> {
    let manifest_path = out.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(PipelineError::Missing(format!(
            "{} (run generate first)",
            manifest_path.display()
        )));
    }
    let manifest: Vec<ManifestRow> = io::read_rows(&manifest_path)?;
    let mut trajectories = Vec::with_capacity(manifest.len());
    let mut splits: [Vec<usize>; 3] = Default::default();
    for (i, row) in manifest.iter().enumerate() {
        let bad = |msg: String| {
            PipelineError::Io(IoError::Format {
                path: manifest_path.clone(),
                msg,
            })
        };
        if row.trajectory != i {
            return Err(bad(format!("trajectory ids out of order at row {i}")));
        }
        let stratum = Stratum::parse(&row.stratum).ok_or_else(|| bad(format!("bad stratum {}", row.stratum)))?;
        let split = SPLIT_NAMES
            .iter()
            .position(|s| *s == row.split)
            .ok_or_else(|| bad(format!("bad split {}", row.split)))?;
        splits[split].push(i);
        trajectories.push(io::read_trajectory(&out.join(&row.file), stratum)?);
    }
    Ok(Generated { trajectories, splits })
}

pub fn write_params_ini(path: &Path, p: &VehicleParams) -> Result<(), PipelineError> {
    let mut text = String::from("[vehicle]\n");
    for (k, v) in [
        ("m", p.m),
        ("i_z", p.i_z),
        ("l_f", p.l_f),
        ("l_r", p.l_r),
        ("c_f", p.c_f),
        ("c_r", p.c_r),
        ("mu", p.mu),
        ("c_shape", p.c_shape),
        ("e_curv", p.e_curv),
        ("g_accel", p.g_accel),
        ("v_eps", p.v_eps),
    ] {
        text.push_str(&format!("{k} = {v}\n"));
    }
    write_text(path, &text)
}

/// Calibrated parameters if `calibrated.ini` exists in `out`.
pub fn read_calibrated(out: &Path) -> Result<Option<VehicleParams>, PipelineError> {
    let path = out.join(CALIBRATED);
    if !path.exists() {
        return Ok(None);
    }
    let ini = ini::Ini::load_from_file(&path).map_err(|e| PipelineError::Fs(format!("{}: {e}", path.display())))?;
    let sec = ini
        .section(Some("vehicle"))
        .ok_or_else(|| PipelineError::Fs(format!("{}: no [vehicle] section", path.display())))?;
    let get = |k: &str| -> Result<f64, PipelineError> {
        sec.get(k)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| PipelineError::Fs(format!("{}: bad or missing {k}", path.display())))
    };
    Ok(Some(VehicleParams {
        m: get("m")?,
        i_z: get("i_z")?,
        l_f: get("l_f")?,
        l_r: get("l_r")?,
        c_f: get("c_f")?,
        c_r: get("c_r")?,
        mu: get("mu")?,
        c_shape: get("c_shape")?,
        e_curv: get("e_curv")?,
        g_accel: get("g_accel")?,
        v_eps: get("v_eps")?,
    }))
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<VehicleParams, PipelineError> {
    let g = load_generated(&cfg.output)?;
    let train = g.dataset(0)?;
    let val = ValidationSet::from_trajectories(
        &g.split_trajectories(1),
        cfg.training.horizon,
        Some(cfg.fence.clone()),
    );
    let report = calibrate_params(&train, &val, cfg.vehicle, &cfg.training)?;
    write_params_ini(&cfg.output.join(CALIBRATED), &report.params)?;
    io::write_history(&cfg.output.join(CALIBRATION_HISTORY), &report.history)?;
    Ok(report.params)
}

/// Physics parameters for learned models: calibrated when available.
pub fn physics_params(cfg: &RunConfig) -> Result<VehicleParams, PipelineError> {
    Ok(read_calibrated(&cfg.output)?.unwrap_or(cfg.vehicle))
}

pub fn initial_model(cfg: &RunConfig, params: VehicleParams) -> Result<DynamicsModel, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    Ok(match cfg.model.kind {
        ModelKind::PcarnnSplit => {
            DynamicsModel::initialized_split(params, &cfg.model.hidden, &cfg.model.g_hidden, &mut rng)?
        }
        k => DynamicsModel::initialized(k, params, &cfg.model.hidden, &mut rng)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub test_rmse: f64,
    pub baseline_rmse: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, PipelineError> {
    let g = load_generated(&cfg.output)?;
    let (train, val, test) = (g.dataset(0)?, g.dataset(1)?, g.dataset(2)?);
    let params = physics_params(cfg)?;
    let model = initial_model(cfg, params)?;
    let report = train_residuals(&train, &val, model, &cfg.training)?;
    save_weights(&report.model, &cfg.weights_path())?;
    io::write_history(&cfg.output.join(LOSS_CURVE), &report.history)?;
    let summary = TrainSummary {
        test_rmse: derivative_rmse(&report.model, &test),
        baseline_rmse: derivative_rmse(&DynamicsModel::Analytical(params), &test),
        best_epoch: report.best_epoch,
        epochs_run: report.history.len(),
    };
    write_text(
        &cfg.output.join(TRAIN_REPORT),
        &format!(
            "variant {}\nparameters {}\nepochs {}\nbest_epoch {}\ntest_rmse {}\nanalytical_test_rmse {}\n",
            report.model.kind().name(),
            report.model.parameter_count(),
            summary.epochs_run,
            summary.best_epoch,
            summary.test_rmse,
            summary.baseline_rmse
        ),
    )?;
    Ok(summary)
}

pub fn controller_model(cfg: &RunConfig, source: ModelSource) -> Result<DynamicsModel, PipelineError> {
    Ok(match source {
        ModelSource::Nominal => DynamicsModel::Analytical(cfg.vehicle),
        ModelSource::Plant => DynamicsModel::Analytical(cfg.plant.effective_params()),
        ModelSource::Calibrated => DynamicsModel::Analytical(
            read_calibrated(&cfg.output)?
                .ok_or_else(|| PipelineError::Missing(format!("{} (run calibrate first)", CALIBRATED)))?,
        ),
        ModelSource::Learned => {
            let p = cfg.weights_path();
            if !p.exists() {
                return Err(PipelineError::Missing(format!("{} (run train first)", p.display())));
            }
            load_weights(&p)?
        }
    })
}

pub fn build_controller(cfg: &RunConfig) -> Result<Controller, PipelineError> {
    Ok(match cfg.simulate.controller {
        ControllerKind::Null => Controller::Null,
        ControllerKind::Dcbf => Controller::Dcbf {
            model: controller_model(cfg, cfg.simulate.model)?,
            cfg: cfg.dcbf,
        },
        ControllerKind::Ttc => Controller::Ttc {
            model: controller_model(cfg, cfg.simulate.model)?,
        },
    })
}

pub fn episodes_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.join(EPISODES_DIR)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<crate::harness::EpisodeSummary>, PipelineError> {
    let plant = Plant::new(cfg.plant)?;
    let controller = build_controller(cfg)?;
    let scenarios = generate_scenarios(&cfg.fence, &cfg.scenario, &plant, &cfg.bounds)?;
    let logs = run_episodes(&controller, &plant, &scenarios, &cfg.bounds, &cfg.scenario.episode);
    let dir = episodes_dir(cfg);
    mkdir(&dir)?;
    for log in &logs {
        io::write_episode(&dir.join(format!("episode_{:04}.csv", log.summary.scenario_id)), log)?;
    }
    let summaries: Vec<_> = logs.iter().map(|l| l.summary).collect();
    io::write_summaries(&dir.join(SUMMARY), &summaries)?;
    Ok(summaries)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<MetricsReport, PipelineError> {
    let path = episodes_dir(cfg).join(SUMMARY);
    let summaries = if path.exists() {
        io::read_summaries(&path)?
    } else {
        Vec::new()
    };
    let report = compute_metrics(&summaries)?;
    io::write_metrics(&cfg.output.join(METRICS_CSV), &report)?;
    write_text(&cfg.output.join(METRICS_TXT), &report.to_text())?;
    Ok(report)
}

/// Evenly spaced `(state, logged command)` pairs from the test trajectories.
pub fn linearity_cases(g: &Generated, count: usize) -> Vec<(WorldState, ControlInput)> {
    let all: Vec<(WorldState, ControlInput)> = g.splits[2]
        .iter()
        .flat_map(|&i| {
            let t = &g.trajectories[i];
            t.states.iter().copied().zip(t.controls.iter().copied())
        })
        .collect();
    if all.len() <= count {
        return all;
    }
    (0..count).map(|k| all[k * all.len() / count]).collect()
}

pub fn cmd_linearity(cfg: &RunConfig) -> Result<Vec<LinearityRecord>, PipelineError> {
    let g = load_generated(&cfg.output)?;
    let model = controller_model(cfg, ModelSource::Learned)?;
    let cases = linearity_cases(&g, cfg.linearity_states);
    let recs = linearity_analysis(&model, &cases, &cfg.fence, &cfg.bounds, &cfg.dcbf);
    io::write_linearity(&cfg.output.join(LINEARITY), &recs)?;
    Ok(recs)
}
