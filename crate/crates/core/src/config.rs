//! Run configuration from a flat INI file.
//!
//! Sections: `run`, `vehicle`, `bounds`, `plant`, `fence`, `dcbf`,
//! `training`, `dataset`, `scenario`, `model`, `simulate`, `linearity`.
//! Unknown sections and keys are rejected. Relative paths resolve against the
//! directory holding the file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::{Ini, Properties};
use thiserror::Error;

use crate::dynamics::{ActuatorBounds, VehicleParams};
use crate::geometry::Polygon;
use crate::harness::{EpisodeConfig, FamilyMix, PlantConfig, ScenarioConfig};
use crate::models::ModelKind;
use crate::safety::DcbfConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key {key} in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("bad value for {section}.{key}: {value}")]
    BadValue { section: String, key: String, value: String },
    #[error("missing required key {section}.{key}")]
    Missing { section: String, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Null,
    Dcbf,
    Ttc,
}

impl FromStr for ControllerKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "null" => Ok(ControllerKind::Null),
            "dcbf" => Ok(ControllerKind::Dcbf),
            "ttc" => Ok(ControllerKind::Ttc),
            _ => Err(()),
        }
    }
}

/// Which dynamics model the controller uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSource {
    /// Analytical model with the `[vehicle]` parameters.
    Nominal,
    /// Analytical model with the calibrated parameters.
    Calibrated,
    /// The trained weights file.
    Learned,
    /// Analytical model with the plant's true parameters.
    Plant,
}

impl FromStr for ModelSource {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "nominal" => Ok(ModelSource::Nominal),
            "calibrated" => Ok(ModelSource::Calibrated),
            "learned" => Ok(ModelSource::Learned),
            "plant" => Ok(ModelSource::Plant),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// Trajectories before mirroring.
    pub n: usize,
    /// Length of each trajectory (s).
    pub duration: f64,
    /// Initial speeds cycled over the trajectories (m/s).
    pub speeds: Vec<f64>,
    pub mix: FamilyMix,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 40,
            duration: 10.0,
            speeds: vec![0.0, 7.0, 14.0, 21.0, 28.0, 35.0],
            mix: FamilyMix::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden widths; for the split variant these are the drift network's.
    pub hidden: Vec<usize>,
    /// Hidden widths of the split variant's gain network.
    pub g_hidden: Vec<usize>,
    pub weights: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateConfig {
    pub controller: ControllerKind,
    pub model: ModelSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub vehicle: VehicleParams,
    pub bounds: ActuatorBounds,
    pub plant: PlantConfig,
    pub fence_path: PathBuf,
    pub fence: Polygon,
    pub dcbf: DcbfConfig,
    pub training: TrainConfig,
    pub dataset: DatasetConfig,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub simulate: SimulateConfig,
    /// Number of test states used by the linearity analysis.
    pub linearity_states: usize,
}

/// Tracks which keys of one section were consumed.
struct Section<'a> {
    name: &'static str,
    props: Option<&'a Properties>,
    used: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn new(ini: &'a Ini, name: &'static str) -> Self {
        Self {
            name,
            props: ini.section(Some(name)),
            used: Vec::new(),
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a str> {
        self.used.push(key);
        self.props.and_then(|p| p.get(key))
    }

    fn bad(&self, key: &str, value: &str) -> ConfigError {
        ConfigError::BadValue {
            section: self.name.into(),
            key: key.into(),
            value: value.into(),
        }
    }

    fn get<T: FromStr>(&mut self, key: &'static str, dst: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.raw(key) {
            *dst = v.trim().parse().map_err(|_| self.bad(key, v))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &'static str, dst: &mut Vec<T>) -> Result<(), ConfigError> {
        if let Some(v) = self.raw(key) {
            *dst = if v.trim().is_empty() {
                Vec::new()
            } else {
                v.split(',')
                    .map(|s| s.trim().parse().map_err(|_| self.bad(key, v)))
                    .collect::<Result<_, _>>()?
            };
        }
        Ok(())
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some(p) = self.props {
            for (k, _) in p.iter() {
                if !self.used.contains(&k) {
                    return Err(ConfigError::UnknownKey {
                        section: self.name.into(),
                        key: k.into(),
                    });
                }
            }
        }
        Ok(())
    }
}

const SECTIONS: [&str; 12] = [
    "run", "vehicle", "bounds", "plant", "fence", "dcbf", "training", "dataset", "scenario", "model", "simulate",
    "linearity",
];

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p.trim());
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (name, props) in ini.iter() {
            match name {
                None if props.is_empty() => {}
                None => {
                    let key = props.iter().next().map(|(k, _)| k.to_string()).unwrap_or_default();
                    return Err(ConfigError::UnknownKey {
                        section: String::new(),
                        key,
                    });
                }
                Some(n) if !SECTIONS.contains(&n) => return Err(ConfigError::UnknownSection(n.into())),
                Some(_) => {}
            }
        }

        let mut s = Section::new(&ini, "run");
        let mut seed = 0u64;
        let mut output = String::from("out");
        s.get("seed", &mut seed)?;
        s.get("output", &mut output)?;
        s.finish()?;

        let mut v = VehicleParams::default();
        let mut s = Section::new(&ini, "vehicle");
        s.get("m", &mut v.m)?;
        s.get("i_z", &mut v.i_z)?;
        s.get("l_f", &mut v.l_f)?;
        s.get("l_r", &mut v.l_r)?;
        s.get("c_f", &mut v.c_f)?;
        s.get("c_r", &mut v.c_r)?;
        s.get("mu", &mut v.mu)?;
        s.get("c_shape", &mut v.c_shape)?;
        s.get("e_curv", &mut v.e_curv)?;
        s.get("g_accel", &mut v.g_accel)?;
        s.get("v_eps", &mut v.v_eps)?;
        s.finish()?;
        v.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let mut b = ActuatorBounds::default();
        let mut s = Section::new(&ini, "bounds");
        s.get("delta_dot_min", &mut b.delta_dot_min)?;
        s.get("delta_dot_max", &mut b.delta_dot_max)?;
        s.get("f_x_min", &mut b.f_x_min)?;
        s.get("f_x_max", &mut b.f_x_max)?;
        s.finish()?;
        b.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let mut plant = PlantConfig {
            base: v,
            ..PlantConfig::default()
        };
        let mut s = Section::new(&ini, "plant");
        s.get("drag_coeff", &mut plant.drag_coeff)?;
        s.get("steering_lag_tau", &mut plant.steering_lag_tau)?;
        s.get("substeps", &mut plant.substeps)?;
        let f = &mut plant.factors;
        s.get("factor_m", &mut f.m)?;
        s.get("factor_i_z", &mut f.i_z)?;
        s.get("factor_l_f", &mut f.l_f)?;
        s.get("factor_l_r", &mut f.l_r)?;
        s.get("factor_c_f", &mut f.c_f)?;
        s.get("factor_c_r", &mut f.c_r)?;
        s.get("factor_mu", &mut f.mu)?;
        s.get("factor_c_shape", &mut f.c_shape)?;
        s.get("factor_e_curv", &mut f.e_curv)?;
        s.finish()?;
        plant.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let mut s = Section::new(&ini, "fence");
        let fence_path = match s.raw("path") {
            Some(p) => resolve(base, p),
            None => {
                return Err(ConfigError::Missing {
                    section: "fence".into(),
                    key: "path".into(),
                })
            }
        };
        s.finish()?;
        let fence = Polygon::load(&fence_path).map_err(|e| ConfigError::Invalid(format!("fence: {e}")))?;

        let mut d = DcbfConfig::default();
        let mut s = Section::new(&ini, "dcbf");
        s.get("t_h", &mut d.t_h)?;
        s.get("n_sub", &mut d.n_sub)?;
        s.get("gamma", &mut d.gamma)?;
        s.get("h_target", &mut d.h_target)?;
        s.get("eps_delta_dot", &mut d.eps_delta_dot)?;
        s.get("gamma_clip", &mut d.gamma_clip)?;
        s.get("force_scale", &mut d.force_scale)?;
        s.get("rho_slack", &mut d.rho_slack)?;
        s.get("lambda_steer", &mut d.lambda[0])?;
        s.get("lambda_force", &mut d.lambda[1])?;
        s.finish()?;
        d.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let mut t = TrainConfig::default();
        let mut s = Section::new(&ini, "training");
        s.get("learning_rate", &mut t.learning_rate)?;
        s.get("adam_beta1", &mut t.adam_beta1)?;
        s.get("adam_beta2", &mut t.adam_beta2)?;
        s.get("adam_eps", &mut t.adam_eps)?;
        s.get("weight_decay", &mut t.weight_decay)?;
        s.get("batch_size", &mut t.batch_size)?;
        s.get("max_epochs", &mut t.max_epochs)?;
        s.get("patience", &mut t.patience)?;
        s.get("horizon", &mut t.horizon)?;
        s.get("lr_floor", &mut t.lr_floor)?;
        s.get("fd_step", &mut t.fd_step)?;
        s.get("physics_lr", &mut t.physics_lr)?;
        s.get("cotrain_physics", &mut t.cotrain_physics)?;
        s.get("power_iterations", &mut t.power_iterations)?;
        s.finish()?;
        t.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let mut ds = DatasetConfig::default();
        let mut s = Section::new(&ini, "dataset");
        s.get("n", &mut ds.n)?;
        s.get("duration", &mut ds.duration)?;
        s.list("speeds", &mut ds.speeds)?;
        read_mix(&mut s, &mut ds.mix)?;
        s.finish()?;
        if ds.n == 0 || !(ds.duration > 0.0) || ds.speeds.is_empty() || ds.speeds.iter().any(|v| !(*v >= 0.0)) {
            return Err(ConfigError::Invalid(
                "dataset needs n >= 1, positive duration and non-negative speeds".into(),
            ));
        }

        let mut sc = ScenarioConfig::default();
        let mut ep = EpisodeConfig::default();
        let mut s = Section::new(&ini, "scenario");
        s.get("n", &mut sc.n)?;
        s.get("v_max", &mut sc.v_max)?;
        s.get("delta_max", &mut sc.delta_max)?;
        s.get("max_t", &mut ep.max_t)?;
        read_mix(&mut s, &mut sc.mix)?;
        s.finish()?;
        sc.episode = ep;
        if sc.n == 0 || !(ep.max_t > 0.0) {
            return Err(ConfigError::Invalid("scenario needs n >= 1 and positive max_t".into()));
        }

        let mut s = Section::new(&ini, "model");
        let mut kind = String::from("pcarnn_split");
        let mut hidden = vec![64, 64];
        let mut g_hidden = vec![64, 64];
        let mut weights = String::from("model.bin");
        s.get("variant", &mut kind)?;
        s.list("hidden", &mut hidden)?;
        s.list("g_hidden", &mut g_hidden)?;
        s.get("weights", &mut weights)?;
        let kind = ModelKind::parse(&kind).ok_or_else(|| s.bad("variant", &kind))?;
        s.finish()?;
        let output = resolve(base, &output);

        let mut s = Section::new(&ini, "simulate");
        let mut controller = ControllerKind::Dcbf;
        let mut source = ModelSource::Learned;
        if let Some(c) = s.raw("controller") {
            controller = c.trim().parse().map_err(|_| s.bad("controller", c))?;
        }
        if let Some(m) = s.raw("model") {
            source = m.trim().parse().map_err(|_| s.bad("model", m))?;
        }
        s.finish()?;

        let mut linearity_states = 500usize;
        let mut s = Section::new(&ini, "linearity");
        s.get("states", &mut linearity_states)?;
        s.finish()?;

        sc.seed = derive_seed(seed, "scenario");
        Ok(Self {
            seed,
            vehicle: v,
            bounds: b,
            plant,
            fence_path,
            fence,
            dcbf: d,
            training: TrainConfig {
                seed: derive_seed(seed, "train"),
                ..t
            },
            dataset: ds,
            scenario: sc,
            model: ModelConfig {
                kind,
                hidden,
                g_hidden,
                weights: PathBuf::from(weights),
            },
            simulate: SimulateConfig {
                controller,
                model: source,
            },
            linearity_states,
            output,
        })
    }

    /// Replaces the master seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scenario.seed = derive_seed(seed, "scenario");
        self.training.seed = derive_seed(seed, "train");
        self
    }

    /// Weights path, relative paths taken inside the output directory.
    pub fn weights_path(&self) -> PathBuf {
        if self.model.weights.is_absolute() {
            self.model.weights.clone()
        } else {
            self.output.join(&self.model.weights)
        }
    }
}

fn read_mix(s: &mut Section, mix: &mut FamilyMix) -> Result<(), ConfigError> {
    let mut st = mix.steering.to_vec();
    let mut fo = mix.force.to_vec();
    s.list("steering_mix", &mut st)?;
    s.list("force_mix", &mut fo)?;
    mix.steering = st
        .try_into()
        .map_err(|_| ConfigError::Invalid("steering_mix needs 4 weights".into()))?;
    mix.force = fo
        .try_into()
        .map_err(|_| ConfigError::Invalid("force_mix needs 5 weights".into()))?;
    if !mix.is_valid() {
        return Err(ConfigError::Invalid("family weights must be non-negative with a positive sum".into()));
    }
    Ok(())
}

/// Per-component seed from the master seed and a fixed label (FNV-1a of the
/// label, mixed by SplitMix64).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
