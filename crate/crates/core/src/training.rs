//! Dataset construction, tire-parameter calibration and residual training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{BodyState, ControlInput, VehicleParams, WorldState};
use crate::geometry::Polygon;
use crate::integrate::rk4_step;
use crate::models::{DynamicsModel, MlpGrads};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("timestamps are not uniform at index {index}")]
    NonUniformTimestamps { index: usize },
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("series lengths differ")]
    LengthMismatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split fractions must be non-negative and sum to 1")]
    InvalidFractions,
    #[error("loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("model has no trainable networks")]
    NotLearned,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SteeringFamily {
    Ramp,
    Sinusoid,
    ConstantRate,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ForceFamily {
    Step,
    Constant,
    Ramp,
    Sinusoid,
    Multiphase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpeedBucket {
    Low,
    Medium,
    High,
}

impl SteeringFamily {
    pub const ALL: [SteeringFamily; 4] = [
        SteeringFamily::Ramp,
        SteeringFamily::Sinusoid,
        SteeringFamily::ConstantRate,
        SteeringFamily::Step,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SteeringFamily::Ramp => "ramp",
            SteeringFamily::Sinusoid => "sinusoid",
            SteeringFamily::ConstantRate => "constant_rate",
            SteeringFamily::Step => "step",
        }
    }
}

impl ForceFamily {
    pub const ALL: [ForceFamily; 5] = [
        ForceFamily::Step,
        ForceFamily::Constant,
        ForceFamily::Ramp,
        ForceFamily::Sinusoid,
        ForceFamily::Multiphase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForceFamily::Step => "step",
            ForceFamily::Constant => "constant",
            ForceFamily::Ramp => "ramp",
            ForceFamily::Sinusoid => "sinusoid",
            ForceFamily::Multiphase => "multiphase",
        }
    }
}

impl SpeedBucket {
    pub const ALL: [SpeedBucket; 3] = [SpeedBucket::Low, SpeedBucket::Medium, SpeedBucket::High];

    /// Low below 8 m/s, high from 20 m/s.
    pub fn of(v_x: f64) -> Self {
        if v_x < 8.0 {
            SpeedBucket::Low
        } else if v_x < 20.0 {
            SpeedBucket::Medium
        } else {
            SpeedBucket::High
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpeedBucket::Low => "low",
            SpeedBucket::Medium => "medium",
            SpeedBucket::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Stratum {
    pub steering: SteeringFamily,
    pub force: ForceFamily,
    pub speed: SpeedBucket,
}

impl Stratum {
    pub fn name(&self) -> String {
        format!("{}/{}/{}", self.steering.name(), self.force.name(), self.speed.name())
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut it = s.split('/');
        let st = it.next()?;
        let fo = it.next()?;
        let sp = it.next()?;
        if it.next().is_some() {
            return None;
        }
        Some(Self {
            steering: *SteeringFamily::ALL.iter().find(|f| f.name() == st)?,
            force: *ForceFamily::ALL.iter().find(|f| f.name() == fo)?,
            speed: *SpeedBucket::ALL.iter().find(|f| f.name() == sp)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub body: BodyState,
    pub u: ControlInput,
    pub xdot_gt: [f64; 4],
}

impl TrajectorySample {
    /// Lateral mirror: negates lateral states, steering rate and the lateral,
    /// yaw and steering derivative components.
    pub fn mirrored(&self) -> Self {
        Self {
            body: self.body.mirrored(),
            u: ControlInput::new(-self.u.delta_dot, self.u.f_x),
            xdot_gt: [self.xdot_gt[0], -self.xdot_gt[1], -self.xdot_gt[2], -self.xdot_gt[3]],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<TrajectorySample>,
    pub strata: Vec<Stratum>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push_all(&mut self, samples: &[TrajectorySample], stratum: Stratum) {
        self.samples.extend_from_slice(samples);
        self.strata.extend(std::iter::repeat_n(stratum, samples.len()));
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i]).collect(),
            strata: idx.iter().map(|&i| self.strata[i]).collect(),
        }
    }
}

/// One logged plant run sampled at a fixed period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub stratum: Stratum,
    pub times: Vec<f64>,
    pub states: Vec<WorldState>,
    /// Command applied from `times[k]` to `times[k+1]`.
    pub controls: Vec<ControlInput>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Reflection about the x axis.
    pub fn mirrored(&self) -> Self {
        self.mirrored_about(0.0)
    }

    /// Reflection about the horizontal line `y = axis_y`.
    pub fn mirrored_about(&self, axis_y: f64) -> Self {
        Self {
            stratum: self.stratum,
            times: self.times.clone(),
            states: self
                .states
                .iter()
                .map(|s| WorldState::new(s.p_x, 2.0 * axis_y - s.p_y, -s.psi, s.body.mirrored()))
                .collect(),
            controls: self
                .controls
                .iter()
                .map(|u| ControlInput::new(-u.delta_dot, u.f_x))
                .collect(),
        }
    }

    pub fn samples(&self) -> Result<Vec<TrajectorySample>, TrainError> {
        let bodies: Vec<BodyState> = self.states.iter().map(|s| s.body).collect();
        finite_diff_derivatives(&self.times, &bodies, &self.controls)
    }
}

/// Derivatives by three-point finite differences: central in the interior,
/// one-sided second-order at both ends.
pub fn finite_diff_derivatives(
    times: &[f64],
    states: &[BodyState],
    controls: &[ControlInput],
) -> Result<Vec<TrajectorySample>, TrainError> {
    let n = states.len();
    if times.len() != n || controls.len() != n {
        return Err(TrainError::LengthMismatch);
    }
    if n < 3 {
        return Err(TrainError::TooFewSamples(n));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(TrainError::NonUniformTimestamps { index: 1 });
    }
    for k in 1..n {
        let step = times[k] - times[k - 1];
        if (step - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(TrainError::NonUniformTimestamps { index: k });
        }
    }
    let x: Vec<[f64; 4]> = states.iter().map(|s| s.to_array()).collect();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut d = [0.0; 4];
        for i in 0..4 {
            d[i] = if k == 0 {
                (-3.0 * x[0][i] + 4.0 * x[1][i] - x[2][i]) / (2.0 * dt)
            } else if k == n - 1 {
                (3.0 * x[k][i] - 4.0 * x[k - 1][i] + x[k - 2][i]) / (2.0 * dt)
            } else {
                (x[k + 1][i] - x[k - 1][i]) / (2.0 * dt)
            };
        }
        out.push(TrajectorySample {
            body: states[k],
            u: controls[k],
            xdot_gt: d,
        });
    }
    Ok(out)
}

/// Originals followed by their lateral mirrors.
pub fn mirror_augment(d: &Dataset) -> Dataset {
    let mut out = d.clone();
    out.samples.extend(d.samples.iter().map(|s| s.mirrored()));
    out.strata.extend_from_slice(&d.strata);
    out
}

/// Per-stratum proportional split of item indices with seeded shuffling.
/// Strata holding at least 8 items get at least one item in every split.
pub fn stratified_split_indices(
    strata: &[Stratum],
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Vec<usize>; 3], TrainError> {
    if strata.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrainError::InvalidFractions);
    }
    let mut groups: std::collections::BTreeMap<Stratum, Vec<usize>> = Default::default();
    for (i, s) in strata.iter().enumerate() {
        groups.entry(*s).or_default().push(i);
    }
    // Strata are laid end to end (members shuffled) and each position goes
    // to the split lagging furthest behind its quota, so small strata still
    // share remainders fairly across the whole dataset.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(strata.len());
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let mut out: [Vec<usize>; 3] = Default::default();
    for (k, i) in order.into_iter().enumerate() {
        let lag = |j: usize| (k + 1) as f64 * fractions[j] - out[j].len() as f64;
        let j = (0..3).fold(0, |best, j| if lag(j) > lag(best) { j } else { best });
        out[j].push(i);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

pub fn stratified_split(
    d: &Dataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), TrainError> {
    let [a, b, c] = stratified_split_indices(&d.strata, fractions, seed)?;
    Ok((d.subset(&a), d.subset(&b), d.subset(&c)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Validation rollout length in samples.
    pub horizon: usize,
    pub lr_floor: f64,
    pub seed: u64,
    /// Central-difference step for the calibration gradient (log space).
    pub fd_step: f64,
    /// Learning rate for the physics parameters (calibration and co-training).
    pub physics_lr: f64,
    /// Co-train the PCARNN physics parameters with the residual heads.
    pub cotrain_physics: bool,
    /// Power iterations per optimizer step on spectrally normalized layers.
    pub power_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 256,
            max_epochs: 50,
            patience: 10,
            horizon: 50,
            lr_floor: 1e-5,
            seed: 0,
            fd_step: 1e-5,
            physics_lr: 1e-3,
            cotrain_physics: false,
            power_iterations: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.physics_lr > 0.0 && self.lr_floor >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.fd_step > 0.0 && self.weight_decay >= 0.0) {
            return bad("adam_eps and fd_step must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.horizon == 0 {
            return bad("batch_size, max_epochs, patience and horizon must be at least 1");
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for `epoch` (0-based).
    pub fn cosine_lr(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.max_epochs.max(1) as f64;
        self.lr_floor + 0.5 * (self.learning_rate - self.lr_floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam moment buffers for a flat parameter vector.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One step; `decay` is the decoupled weight-decay coefficient.
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig, decay: f64) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + decay * params[i]);
        }
    }
}

/// Calibrated parameters `(ln C_f, ln C_r, ln C, E)`.
fn physics_vector(p: &VehicleParams) -> [f64; 4] {
    [p.c_f.ln(), p.c_r.ln(), p.c_shape.ln(), p.e_curv]
}

fn with_physics(base: &VehicleParams, th: &[f64; 4]) -> VehicleParams {
    VehicleParams {
        c_f: th[0].exp(),
        c_r: th[1].exp(),
        c_shape: th[2].exp(),
        e_curv: th[3].min(1.0),
        ..*base
    }
}

/// Mean of `‖model(s,u) − ẋ‖²` over `idx` (all samples when `None`).
pub fn mean_loss(model: &DynamicsModel, d: &Dataset, idx: Option<&[usize]>) -> f64 {
    let eval = |s: &TrajectorySample| {
        let p = model.derivative(&s.body, &s.u);
        (0..4).map(|i| (p[i] - s.xdot_gt[i]).powi(2)).sum::<f64>()
    };
    match idx {
        Some(ix) if !ix.is_empty() => ix.iter().map(|&i| eval(&d.samples[i])).sum::<f64>() / ix.len() as f64,
        Some(_) => 0.0,
        None if d.is_empty() => 0.0,
        None => d.samples.iter().map(eval).sum::<f64>() / d.len() as f64,
    }
}

/// Root mean square derivative error pooled over all four components.
pub fn derivative_rmse(model: &DynamicsModel, d: &Dataset) -> f64 {
    (mean_loss(model, d, None) / 4.0).sqrt()
}

/// Per-component RMSE.
pub fn component_rmse(model: &DynamicsModel, d: &Dataset) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for s in &d.samples {
        let p = model.derivative(&s.body, &s.u);
        for i in 0..4 {
            acc[i] += (p[i] - s.xdot_gt[i]).powi(2);
        }
    }
    acc.map(|a| (a / d.len().max(1) as f64).sqrt())
}

/// Held-out rollout windows used for early stopping.
#[derive(Debug, Clone, Default)]
pub struct ValidationSet {
    pub windows: Vec<ValidationWindow>,
    /// Fence for the barrier-prediction term; omitted when `None`.
    pub fence: Option<Polygon>,
}

#[derive(Debug, Clone)]
pub struct ValidationWindow {
    pub dt: f64,
    pub controls: Vec<ControlInput>,
    /// `reference[0]` is the start state; `reference.len() == controls.len() + 1`.
    pub reference: Vec<WorldState>,
}

impl ValidationSet {
    /// Non-overlapping windows of `horizon` steps from each trajectory.
    pub fn from_trajectories(trajs: &[Trajectory], horizon: usize, fence: Option<Polygon>) -> Self {
        let mut windows = Vec::new();
        for t in trajs {
            if t.len() < 2 {
                continue;
            }
            let dt = t.times[1] - t.times[0];
            let mut k = 0;
            while k + horizon < t.len() {
                windows.push(ValidationWindow {
                    dt,
                    controls: t.controls[k..k + horizon].to_vec(),
                    reference: t.states[k..=k + horizon].to_vec(),
                });
                k += horizon;
            }
        }
        Self { windows, fence }
    }

    /// Mean position error over each RK4 rollout plus, when a fence is set,
    /// the mean terminal barrier error.
    pub fn error(&self, model: &DynamicsModel) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        let mut pos = 0.0;
        let mut bar = 0.0;
        for w in &self.windows {
            let mut x = w.reference[0];
            let mut e = 0.0;
            for (k, u) in w.controls.iter().enumerate() {
                x = rk4_step(model, &x, u, w.dt);
                e += x.position().sub(w.reference[k + 1].position()).norm();
            }
            pos += e / w.controls.len() as f64;
            if let Some(f) = &self.fence {
                let r = w.reference.last().expect("nonempty window");
                bar += (f.signed_distance(x.position()) - f.signed_distance(r.position())).abs();
            }
        }
        let err = (pos + bar) / self.windows.len() as f64;
        if err.is_finite() {
            err
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub params: VehicleParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Central-difference gradient of the batch loss in `(ln C_f, ln C_r, ln C,
/// E)`; the returned loss is at `th`.
fn physics_gradient(
    loss_at: &dyn Fn(&VehicleParams) -> f64,
    base: &VehicleParams,
    th: &[f64; 4],
    h: f64,
) -> (f64, [f64; 4]) {
    let l0 = loss_at(&with_physics(base, th));
    let mut g = [0.0; 4];
    for i in 0..4 {
        let mut p = *th;
        let mut m = *th;
        p[i] += h;
        m[i] -= h;
        g[i] = (loss_at(&with_physics(base, &p)) - loss_at(&with_physics(base, &m))) / (2.0 * h);
    }
    (l0, g)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Fits `(C_f, C_r, C, E)` of the analytical model to derivative data with
/// Adam on `(ln C_f, ln C_r, ln C, E)`. Gradients are central finite
/// differences (step `cfg.fd_step`). Early stopping uses
/// [`ValidationSet::error`]; with no windows it uses the training loss.
pub fn calibrate_params(
    train: &Dataset,
    val: &ValidationSet,
    init: VehicleParams,
    cfg: &TrainConfig,
) -> Result<CalibrationReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut th = physics_vector(&init);
    let mut adam = Adam::new(4);
    let val_metric = |p: &VehicleParams| -> f64 {
        let m = DynamicsModel::Analytical(*p);
        if val.windows.is_empty() {
            mean_loss(&m, train, None)
        } else {
            val.error(&m)
        }
    };
    let mut best = (val_metric(&init), init, 0usize);
    let mut history = Vec::new();
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let order = shuffled(train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss_at = |p: &VehicleParams| mean_loss(&DynamicsModel::Analytical(*p), train, Some(batch));
            let (l0, g) = physics_gradient(&loss_at, &init, &th, cfg.fd_step);
            if !l0.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::DivergedLoss { epoch });
            }
            total += l0 * batch.len() as f64;
            adam.step(&mut th, &g, cfg.physics_lr, cfg, 0.0);
            th[3] = th[3].clamp(-9.999, 1.0);
        }
        let params = with_physics(&init, &th);
        let metric = val_metric(&params);
        history.push(EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            val_metric: metric,
            learning_rate: cfg.physics_lr,
        });
        if metric < best.0 {
            best = (metric, params, epoch + 1);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(CalibrationReport {
        params: best.1,
        best_epoch: best.2,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: DynamicsModel,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Number of fixed chunks a mini-batch is split into for parallel gradient
/// accumulation. Chunk sums are added in order, so results do not depend on
/// the thread count.
const GRAD_CHUNKS: usize = 8;

fn flatten(g: &[MlpGrads]) -> Vec<f64> {
    let mut out = Vec::new();
    for net in g {
        for (w, b) in net.weight.iter().zip(&net.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }
    out
}

/// Flat parameter vector and decay mask (1 for weights, 0 for biases).
fn model_params(model: &DynamicsModel) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::new();
    let mut mask = Vec::new();
    for net in model.nets() {
        for l in &net.layers {
            p.extend_from_slice(&l.weight);
            mask.extend(std::iter::repeat_n(1.0, l.weight.len()));
            p.extend_from_slice(&l.bias);
            mask.extend(std::iter::repeat_n(0.0, l.bias.len()));
        }
    }
    (p, mask)
}

fn set_model_params(model: &mut DynamicsModel, p: &[f64]) {
    let mut k = 0;
    for net in model.nets_mut() {
        for l in &mut net.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&p[k..k + n]);
            k += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&p[k..k + n]);
            k += n;
        }
    }
}

/// Mean loss and flat gradient over `batch`.
pub fn batch_gradient(model: &DynamicsModel, d: &Dataset, batch: &[usize]) -> (f64, Vec<f64>) {
    let chunk = batch.len().div_ceil(GRAD_CHUNKS).max(1);
    let parts: Vec<(f64, Vec<MlpGrads>)> = batch
        .par_chunks(chunk)
        .map(|ix| {
            let mut g = model.zero_grads();
            let mut loss = 0.0;
            for &i in ix {
                let s = &d.samples[i];
                loss += model.loss_and_grad(&s.body, &s.u, &s.xdot_gt, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut loss = 0.0;
    let mut flat: Option<Vec<f64>> = None;
    for (l, g) in parts {
        loss += l;
        let f = flatten(&g);
        match &mut flat {
            None => flat = Some(f),
            Some(acc) => acc.iter_mut().zip(&f).for_each(|(a, b)| *a += b),
        }
    }
    let n = batch.len().max(1) as f64;
    let mut flat = flat.unwrap_or_default();
    flat.iter_mut().for_each(|x| *x /= n);
    (loss / n, flat)
}

/// Trains the learned parts of `model` by derivative matching with AdamW
/// (decay on weights only) and a cosine-annealed learning rate. Spectral
/// normalization is re-applied after every step. Early stopping tracks the
/// validation derivative loss (training loss when `val` is empty).
pub fn train_residuals(
    train: &Dataset,
    val: &Dataset,
    model: DynamicsModel,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !model.kind().is_learned() {
        return Err(TrainError::NotLearned);
    }
    let mut model = model;
    let (mut params, mask) = model_params(&model);
    let mut adam = Adam::new(params.len());
    let cotrain = cfg.cotrain_physics && model.kind().is_pcarnn();
    let base = *model.params().unwrap_or(&VehicleParams::default());
    let mut th = physics_vector(&base);
    let mut adam_phys = Adam::new(4);
    let metric = |m: &DynamicsModel| {
        if val.is_empty() {
            mean_loss(m, train, None)
        } else {
            mean_loss(m, val, None)
        }
    };
    let mut best = (metric(&model), model.clone(), 0usize);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut decayed = vec![0.0; params.len()];
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.cosine_lr(epoch);
        let order = shuffled(train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_gradient(&model, train, batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::DivergedLoss { epoch });
            }
            total += loss * batch.len() as f64;
            // Decoupled decay only on weights: split the step in two.
            let before = params.clone();
            adam.step(&mut params, &grad, lr, cfg, 0.0);
            for i in 0..params.len() {
                decayed[i] = lr * cfg.weight_decay * mask[i] * before[i];
                params[i] -= decayed[i];
            }
            set_model_params(&mut model, &params);
            model.spectral_normalize(cfg.power_iterations);
            if cotrain {
                let snapshot = model.clone();
                let loss_at = |p: &VehicleParams| {
                    let mut m = snapshot.clone();
                    *m.params_mut().expect("pcarnn has params") = *p;
                    mean_loss(&m, train, Some(batch))
                };
                let (_, g) = physics_gradient(&loss_at, &base, &th, cfg.fd_step);
                if g.iter().all(|x| x.is_finite()) {
                    adam_phys.step(&mut th, &g, cfg.physics_lr, cfg, 0.0);
                    th[3] = th[3].clamp(-9.999, 1.0);
                    *model.params_mut().expect("pcarnn has params") = with_physics(&base, &th);
                }
            }
            // Re-read in case normalization rescaled weights.
            params = model_params(&model).0;
        }
        let m = metric(&model);
        if !m.is_finite() {
            return Err(TrainError::DivergedLoss { epoch });
        }
        history.push(EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            val_metric: m,
            learning_rate: lr,
        });
        if m < best.0 {
            best = (m, model.clone(), epoch + 1);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainReport {
        model: best.1,
        best_epoch: best.2,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::derivative;
    use crate::models::ModelKind;
    use rand::Rng;

    fn stratum(i: usize) -> Stratum {
        Stratum {
            steering: SteeringFamily::ALL[i % 4],
            force: ForceFamily::ALL[i % 5],
            speed: SpeedBucket::ALL[i % 3],
        }
    }

    fn series(f: impl Fn(f64) -> f64, n: usize, dt: f64) -> (Vec<f64>, Vec<BodyState>, Vec<ControlInput>) {
        let t: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let s = t.iter().map(|&t| BodyState::new(f(t), 0.0, 0.0, 0.0)).collect();
        (t, s, vec![ControlInput::default(); n])
    }

    #[test]
    fn finite_differences_on_polynomials() {
        let (t, s, u) = series(|t| 2.0 * t, 50, 0.02);
        for smp in finite_diff_derivatives(&t, &s, &u).unwrap() {
            assert!((smp.xdot_gt[0] - 2.0).abs() < 1e-10);
        }
        let (t, s, u) = series(|t| t * t, 50, 0.02);
        let d = finite_diff_derivatives(&t, &s, &u).unwrap();
        for (k, smp) in d.iter().enumerate() {
            assert!((smp.xdot_gt[0] - 2.0 * t[k]).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn finite_differences_on_sinusoid() {
        let dt = 0.02;
        let (t, s, u) = series(|t| (10.0 * t).sin(), 200, dt);
        let d = finite_diff_derivatives(&t, &s, &u).unwrap();
        let bound = (10.0 * dt).powi(2) / 6.0 * 10.0;
        for (k, smp) in d.iter().enumerate().skip(1).take(198) {
            assert!((smp.xdot_gt[0] - 10.0 * (10.0 * t[k]).cos()).abs() <= bound);
        }
    }

    #[test]
    fn finite_differences_errors() {
        let (mut t, s, u) = series(|t| t, 5, 0.02);
        assert_eq!(
            finite_diff_derivatives(&t[..2], &s[..2], &u[..2]).unwrap_err(),
            TrainError::TooFewSamples(2)
        );
        t[3] += 0.001;
        assert_eq!(
            finite_diff_derivatives(&t, &s, &u).unwrap_err(),
            TrainError::NonUniformTimestamps { index: 3 }
        );
    }

    #[test]
    fn mirror_properties() {
        let straight = TrajectorySample {
            body: BodyState::new(10.0, 0.0, 0.0, 0.0),
            u: ControlInput::new(0.0, 500.0),
            xdot_gt: [0.25, 0.0, 0.0, 0.0],
        };
        assert_eq!(straight.mirrored(), straight);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = VehicleParams::default();
        for _ in 0..100 {
            let body = BodyState::new(
                rng.random_range(0.0..30.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
            );
            let u = ControlInput::new(rng.random_range(-1.0..1.0), rng.random_range(-12000.0..7000.0));
            let s = TrajectorySample {
                body,
                u,
                xdot_gt: derivative(&body, &u, &p),
            };
            assert_eq!(s.mirrored().mirrored(), s);
            let m = s.mirrored();
            let expect = derivative(&m.body, &m.u, &p);
            for i in 0..4 {
                assert!((m.xdot_gt[i] - expect[i]).abs() <= 1e-12 * (1.0 + expect[i].abs()));
            }
        }
        let d = Dataset {
            samples: vec![straight; 3],
            strata: vec![stratum(0); 3],
        };
        assert_eq!(mirror_augment(&d).len(), 6);
    }

    #[test]
    fn split_counts_and_determinism() {
        let strata: Vec<Stratum> = (0..800).map(|i| stratum(i % 4)).collect();
        let [a, b, c] = stratified_split_indices(&strata, [0.75, 0.125, 0.125], 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (600, 100, 100));
        for s in 0..4 {
            let count = |v: &[usize]| v.iter().filter(|&&i| i % 4 == s).count();
            assert_eq!((count(&a), count(&b), count(&c)), (150, 25, 25));
        }
        assert_eq!(
            stratified_split_indices(&strata, [0.75, 0.125, 0.125], 7).unwrap(),
            [a.clone(), b, c]
        );
        assert_ne!(stratified_split_indices(&strata, [0.75, 0.125, 0.125], 8).unwrap()[0], a);
        assert_eq!(stratified_split_indices(&[], [0.75, 0.125, 0.125], 7).unwrap_err(), TrainError::EmptyDataset);
        assert_eq!(stratified_split_indices(&strata, [0.7, 0.1, 0.1], 7).unwrap_err(), TrainError::InvalidFractions);
        // Small strata still reach every split.
        for n in 8..40 {
            let strata: Vec<Stratum> = (0..n).map(|_| stratum(1)).collect();
            let parts = stratified_split_indices(&strata, [0.75, 0.125, 0.125], n as u64).unwrap();
            assert!(parts.iter().all(|p| !p.is_empty()), "n={n}");
            assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), n);
        }
    }

    #[test]
    fn stratum_names_round_trip() {
        for i in 0..60 {
            let s = stratum(i);
            assert_eq!(Stratum::parse(&s.name()), Some(s));
        }
        assert_eq!(Stratum::parse("ramp/step"), None);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            max_epochs: 10,
            ..Default::default()
        };
        assert!((cfg.cosine_lr(0) - 1e-3).abs() < 1e-15);
        assert!(cfg.cosine_lr(5) < cfg.cosine_lr(4));
        assert!((cfg.cosine_lr(10) - 1e-5).abs() < 1e-15);
    }

    fn analytic_dataset(p: &VehicleParams, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Dataset::default();
        for i in 0..n {
            let body = BodyState::new(
                rng.random_range(2.0..30.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.3..0.3),
            );
            let u = ControlInput::new(rng.random_range(-1.0..1.0), rng.random_range(-8000.0..6000.0));
            d.push_all(
                &[TrajectorySample {
                    body,
                    u,
                    xdot_gt: derivative(&body, &u, p),
                }],
                stratum(i),
            );
        }
        d
    }

    #[test]
    fn calibration_from_truth_is_noop_and_positive() {
        let p = VehicleParams::default();
        let d = analytic_dataset(&p, 500, 1);
        assert!(mean_loss(&DynamicsModel::Analytical(p), &d, None) <= 1e-8);
        let cfg = TrainConfig {
            max_epochs: 3,
            ..Default::default()
        };
        let r = calibrate_params(&d, &ValidationSet::default(), p, &cfg).unwrap();
        assert!(r.params.c_f > 0.0 && r.params.c_r > 0.0 && r.params.c_shape > 0.0);
        assert_eq!(r.best_epoch, 0);
        assert_eq!(r.params, p);
    }

    #[test]
    fn calibration_moves_toward_truth() {
        let p = VehicleParams::default();
        let d = analytic_dataset(&p, 2000, 2);
        let init = VehicleParams { c_f: p.c_f * 1.3, ..p };
        let cfg = TrainConfig {
            max_epochs: 40,
            physics_lr: 1e-2,
            ..Default::default()
        };
        let r = calibrate_params(&d, &ValidationSet::default(), init, &cfg).unwrap();
        assert!((r.params.c_f / p.c_f - 1.0).abs() < 0.05, "{}", r.params.c_f);
    }

    #[test]
    fn training_reduces_loss_and_keeps_structure() {
        let truth = VehicleParams {
            c_f: 88000.0,
            ..Default::default()
        };
        let d = analytic_dataset(&truth, 1500, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [ModelKind::PcarnnSplit, ModelKind::PcarnnShared, ModelKind::Residual] {
            let m0 = DynamicsModel::initialized(kind, VehicleParams::default(), &[16, 16], &mut rng).unwrap();
            let cfg = TrainConfig {
                max_epochs: 15,
                batch_size: 64,
                learning_rate: 3e-3,
                ..Default::default()
            };
            let before = mean_loss(&m0, &d, None);
            let r = train_residuals(&d, &Dataset::default(), m0, &cfg).unwrap();
            let after = mean_loss(&r.model, &d, None);
            assert!(after < before, "{kind:?} {before} -> {after}");
            if kind.is_pcarnn() {
                let (_, g) = r.model.pcarnn_fg(&BodyState::new(9.0, 0.1, 0.1, 0.1)).unwrap();
                assert_eq!(g[3], [1.0, 0.0]);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let d = analytic_dataset(&VehicleParams::default(), 300, 4);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let m = DynamicsModel::initialized(ModelKind::PcarnnSplit, VehicleParams::default(), &[8], &mut rng).unwrap();
            let cfg = TrainConfig {
                max_epochs: 3,
                batch_size: 32,
                cotrain_physics: true,
                ..Default::default()
            };
            train_residuals(&d, &Dataset::default(), m, &cfg).unwrap().model
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn analytical_model_is_rejected() {
        let d = analytic_dataset(&VehicleParams::default(), 10, 4);
        let m = DynamicsModel::Analytical(VehicleParams::default());
        assert_eq!(
            train_residuals(&d, &Dataset::default(), m, &TrainConfig::default()).unwrap_err(),
            TrainError::NotLearned
        );
    }
}
