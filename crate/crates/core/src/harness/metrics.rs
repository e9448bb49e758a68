//! Episode-level classification metrics.

use serde::{Deserialize, Serialize};

use super::episode::EpisodeSummary;
use super::scenario::{Label, Regime};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// Required interventions that still breached.
    pub cf: usize,
}

impl Confusion {
    pub fn add(&mut self, s: &EpisodeSummary) {
        match (s.label == Label::Unsafe, s.intervened) {
            (true, true) => {
                self.tp += 1;
                if s.breach {
                    self.cf += 1;
                }
            }
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    /// F1 scaled by the contained fraction of true positives (0 when TP = 0).
    pub fn cf1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        self.f1() * (self.tp - self.cf) as f64 / self.tp as f64
    }

    pub fn fpr(&self) -> f64 {
        let d = self.fp + self.tn;
        if d == 0 {
            0.0
        } else {
            self.fp as f64 / d as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub counts: Confusion,
    pub cf1: f64,
    pub fpr: f64,
    /// Median over episodes of the minimum barrier.
    pub mcd_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Metrics,
    /// Regimes with at least one episode, in [`Regime::ALL`] order.
    pub per_regime: Vec<(Regime, Metrics)>,
}

/// Median; mean of the two middle values for even counts, NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn metrics_of<'a>(eps: impl Iterator<Item = &'a EpisodeSummary>) -> Metrics {
    let mut c = Confusion::default();
    let mut mins = Vec::new();
    for s in eps {
        c.add(s);
        mins.push(s.min_sdf);
    }
    Metrics {
        episodes: mins.len(),
        counts: c,
        cf1: c.cf1(),
        fpr: c.fpr(),
        mcd_plus: median(&mins),
    }
}

pub fn compute_metrics(episodes: &[EpisodeSummary]) -> Result<MetricsReport, HarnessError> {
    if episodes.is_empty() {
        return Err(HarnessError::NoEpisodes);
    }
    let per_regime = Regime::ALL
        .into_iter()
        .filter(|r| episodes.iter().any(|e| e.regime == *r))
        .map(|r| (r, metrics_of(episodes.iter().filter(|e| e.regime == r))))
        .collect();
    Ok(MetricsReport {
        overall: metrics_of(episodes.iter()),
        per_regime,
    })
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let line = |name: &str, m: &Metrics| {
            format!(
                "{name:<14} n={:<4} TP={:<4} FP={:<4} TN={:<4} FN={:<4} CF={:<4} CF1={:.3} FPR={:.3} MCD+={:.3}\n",
                m.episodes, m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn_, m.counts.cf, m.cf1, m.fpr, m.mcd_plus
            )
        };
        let mut out = line("overall", &self.overall);
        for (r, m) in &self.per_regime {
            out.push_str(&line(r.name(), m));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(label: Label, intervened: bool, breach: bool, min_sdf: f64) -> EpisodeSummary {
        EpisodeSummary {
            scenario_id: 0,
            label,
            regime: Regime::LowStraight,
            min_sdf,
            breach,
            intervened,
        }
    }

    #[test]
    fn all_negatives() {
        let eps: Vec<_> = (0..5).map(|i| ep(Label::Safe, false, false, i as f64)).collect();
        let r = compute_metrics(&eps).unwrap();
        assert_eq!(r.overall.fpr, 0.0);
        assert_eq!(r.overall.cf1, 0.0);
        assert_eq!(r.overall.mcd_plus, 2.0);
    }

    #[test]
    fn perfect_classifier() {
        let eps: Vec<_> = (0..10).map(|_| ep(Label::Unsafe, true, false, 0.3)).collect();
        let r = compute_metrics(&eps).unwrap();
        assert_eq!(r.overall.cf1, 1.0);
    }

    #[test]
    fn mixed_table() {
        let c = Confusion {
            tp: 8,
            fn_: 2,
            fp: 1,
            tn: 0,
            cf: 2,
        };
        let p = 8.0 / 9.0;
        let r = 8.0 / 10.0;
        let f1 = 2.0 * p * r / (p + r);
        assert!((c.f1() - f1).abs() < 1e-15);
        assert!((c.cf1() - f1 * 6.0 / 8.0).abs() < 1e-15);
        assert!((c.cf1() - 0.632).abs() < 1e-3);
    }

    #[test]
    fn empty_is_an_error() {
        assert_eq!(compute_metrics(&[]).unwrap_err(), HarnessError::NoEpisodes);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
