//! CSV formats for trajectories, processed datasets, episodes and reports.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{BodyState, ControlInput, WorldState};
use crate::harness::{
    EpisodeLog, EpisodeSummary, Label, LinearityRecord, Metrics, MetricsReport, Regime,
};
use crate::safety::DecisionKind;
use crate::training::{EpochStats, Stratum, Trajectory, TrajectorySample};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn writer(path: &Path) -> Result<csv::Writer<File>, IoError> {
    let f = File::create(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(f))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let f = File::open(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    csv::Reader::from_reader(f)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        })
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    p_x: f64,
    p_y: f64,
    psi: f64,
    v_x: f64,
    v_y: f64,
    omega: f64,
    delta: f64,
    delta_dot_cmd: f64,
    #[serde(rename = "F_x_cmd")]
    f_x_cmd: f64,
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<(), IoError> {
    write_rows(
        path,
        t.times.iter().zip(&t.states).zip(&t.controls).map(|((&time, s), u)| TrajectoryRow {
            t: time,
            p_x: s.p_x,
            p_y: s.p_y,
            psi: s.psi,
            v_x: s.body.v_x,
            v_y: s.body.v_y,
            omega: s.body.omega,
            delta: s.body.delta,
            delta_dot_cmd: u.delta_dot,
            f_x_cmd: u.f_x,
        }),
    )
}

pub fn read_trajectory(path: &Path, stratum: Stratum) -> Result<Trajectory, IoError> {
    let rows: Vec<TrajectoryRow> = read_rows(path)?;
    if rows.is_empty() {
        return Err(format_err(path, "empty trajectory"));
    }
    Ok(Trajectory {
        stratum,
        times: rows.iter().map(|r| r.t).collect(),
        states: rows
            .iter()
            .map(|r| WorldState {
                p_x: r.p_x,
                p_y: r.p_y,
                psi: r.psi,
                body: BodyState::new(r.v_x, r.v_y, r.omega, r.delta),
            })
            .collect(),
        controls: rows.iter().map(|r| ControlInput::new(r.delta_dot_cmd, r.f_x_cmd)).collect(),
    })
}

/// One line of the split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub trajectory: usize,
    pub file: String,
    /// Source trajectory of a mirrored copy.
    pub mirror_of: Option<usize>,
    pub stratum: String,
    pub split: String,
}

/// Processed sample: raw columns plus finite-difference derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessedRow {
    pub trajectory: usize,
    pub t: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub psi: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
    pub delta: f64,
    pub delta_dot_cmd: f64,
    #[serde(rename = "F_x_cmd")]
    pub f_x_cmd: f64,
    pub dv_x: f64,
    pub dv_y: f64,
    pub domega: f64,
    pub ddelta: f64,
}

impl ProcessedRow {
    pub fn new(trajectory: usize, t: f64, x: &WorldState, s: &TrajectorySample) -> Self {
        Self {
            trajectory,
            t,
            p_x: x.p_x,
            p_y: x.p_y,
            psi: x.psi,
            v_x: s.body.v_x,
            v_y: s.body.v_y,
            omega: s.body.omega,
            delta: s.body.delta,
            delta_dot_cmd: s.u.delta_dot,
            f_x_cmd: s.u.f_x,
            dv_x: s.xdot_gt[0],
            dv_y: s.xdot_gt[1],
            domega: s.xdot_gt[2],
            ddelta: s.xdot_gt[3],
        }
    }

    pub fn sample(&self) -> TrajectorySample {
        TrajectorySample {
            body: BodyState::new(self.v_x, self.v_y, self.omega, self.delta),
            u: ControlInput::new(self.delta_dot_cmd, self.f_x_cmd),
            xdot_gt: [self.dv_x, self.dv_y, self.domega, self.ddelta],
        }
    }

    pub fn world(&self) -> WorldState {
        WorldState {
            p_x: self.p_x,
            p_y: self.p_y,
            psi: self.psi,
            body: BodyState::new(self.v_x, self.v_y, self.omega, self.delta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct EpisodeCsvRow {
    t: f64,
    p_x: f64,
    p_y: f64,
    psi: f64,
    v_x: f64,
    v_y: f64,
    omega: f64,
    delta: f64,
    nom_delta_dot: f64,
    #[serde(rename = "nom_F_x")]
    nom_f_x: f64,
    delta_dot: f64,
    #[serde(rename = "F_x")]
    f_x: f64,
    decision: &'static str,
    h: f64,
    h_nom: f64,
    beta: f64,
    j_delta_dot: f64,
    #[serde(rename = "j_F_x")]
    j_f_x: f64,
    slack_inf: f64,
    phase: &'static str,
}

pub fn write_episode(path: &Path, log: &EpisodeLog) -> Result<(), IoError> {
    write_rows(
        path,
        log.rows.iter().map(|r| EpisodeCsvRow {
            t: r.t,
            p_x: r.state.p_x,
            p_y: r.state.p_y,
            psi: r.state.psi,
            v_x: r.state.body.v_x,
            v_y: r.state.body.v_y,
            omega: r.state.body.omega,
            delta: r.state.body.delta,
            nom_delta_dot: r.u_nom.delta_dot,
            nom_f_x: r.u_nom.f_x,
            delta_dot: r.u_applied.delta_dot,
            f_x: r.u_applied.f_x,
            decision: r.kind.name(),
            h: r.h,
            h_nom: r.h_nom,
            beta: r.beta,
            j_delta_dot: r.jacobian[0],
            j_f_x: r.jacobian[1],
            slack_inf: r.slack_inf_norm,
            phase: r.phase.name(),
        }),
    )
}

/// Decision column of an episode file, for consumers that only need it.
pub fn read_episode_decisions(path: &Path) -> Result<Vec<DecisionKind>, IoError> {
    #[derive(Deserialize)]
    struct Row {
        decision: String,
    }
    read_rows::<Row>(path)?
        .into_iter()
        .map(|r| DecisionKind::parse(&r.decision).ok_or_else(|| format_err(path, format!("bad decision {}", r.decision))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryRow {
    scenario_id: usize,
    label: String,
    regime: String,
    min_sdf: f64,
    breach: bool,
    intervened: bool,
}

pub fn write_summaries(path: &Path, s: &[EpisodeSummary]) -> Result<(), IoError> {
    write_rows(
        path,
        s.iter().map(|e| SummaryRow {
            scenario_id: e.scenario_id,
            label: e.label.name().into(),
            regime: e.regime.name().into(),
            min_sdf: e.min_sdf,
            breach: e.breach,
            intervened: e.intervened,
        }),
    )
}

pub fn read_summaries(path: &Path) -> Result<Vec<EpisodeSummary>, IoError> {
    read_rows::<SummaryRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(EpisodeSummary {
                scenario_id: r.scenario_id,
                label: Label::parse(&r.label).ok_or_else(|| format_err(path, format!("bad label {}", r.label)))?,
                regime: Regime::parse(&r.regime).ok_or_else(|| format_err(path, format!("bad regime {}", r.regime)))?,
                min_sdf: r.min_sdf,
                breach: r.breach,
                intervened: r.intervened,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsRow {
    group: String,
    n: usize,
    tp: usize,
    fp: usize,
    tn: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    cf: usize,
    cf1: f64,
    fpr: f64,
    mcd_plus: f64,
}

fn metrics_row(group: &str, m: &Metrics) -> MetricsRow {
    MetricsRow {
        group: group.into(),
        n: m.episodes,
        tp: m.counts.tp,
        fp: m.counts.fp,
        tn: m.counts.tn,
        fn_: m.counts.fn_,
        cf: m.counts.cf,
        cf1: m.cf1,
        fpr: m.fpr,
        mcd_plus: m.mcd_plus,
    }
}

pub fn write_metrics(path: &Path, r: &MetricsReport) -> Result<(), IoError> {
    let mut rows = vec![metrics_row("overall", &r.overall)];
    rows.extend(r.per_regime.iter().map(|(g, m)| metrics_row(g.name(), m)));
    write_rows(path, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct LinearityRow {
    state_id: usize,
    channel: &'static str,
    sign: i8,
    eps_lin: f64,
}

pub fn write_linearity(path: &Path, recs: &[LinearityRecord]) -> Result<(), IoError> {
    write_rows(
        path,
        recs.iter().map(|r| LinearityRow {
            state_id: r.state_id,
            channel: r.channel.name(),
            sign: r.sign,
            eps_lin: r.eps_lin,
        }),
    )
}

pub fn write_history(path: &Path, h: &[EpochStats]) -> Result<(), IoError> {
    write_rows(path, h.iter())
}
