//! Exact solver for the two-input, slack-penalized, box-constrained
//! minimal-deviation QP
//!
//! ```text
//! min ½ (u − u_nom)ᵀ W (u − u_nom) + ½ ρ Σ ξᵢ²
//! s.t. aᵢ·u + ξᵢ ≥ bᵢ,  ξᵢ ≥ 0,  u_min ≤ u ≤ u_max
//! ```
//!
//! For fixed `u` the optimal slack is `ξᵢ = max(0, bᵢ − aᵢ·u)`, so the
//! problem reduces to a piecewise quadratic over the box. Every piece is
//! enumerated: each input sits on its lower bound, upper bound or is free,
//! and each row is either penalized or inactive.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feasibility tolerance used when screening candidates.
pub const FEAS_TOL: f64 = 1e-8;
/// Largest number of rows accepted (2^rows candidate row sets).
pub const MAX_ROWS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("invalid QP: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpRow {
    pub a: [f64; 2],
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub u_nom: [f64; 2],
    /// Diagonal of W.
    pub w: [f64; 2],
    pub rho: f64,
    pub rows: Vec<QpRow>,
    pub u_min: [f64; 2],
    pub u_max: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub u_star: [f64; 2],
    pub xi_star: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// Largest violation among stationarity, dual sign, complementarity and
    /// primal feasibility conditions.
    pub kkt_residual: f64,
}

impl QpSolution {
    fn failure(p: &QpProblem) -> Self {
        Self {
            u_star: p.u_nom,
            xi_star: vec![0.0; p.rows.len()],
            objective: f64::NAN,
            status: QpStatus::NumericalFailure,
            kkt_residual: f64::INFINITY,
        }
    }

    pub fn slack_inf_norm(&self) -> f64 {
        self.xi_star.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl QpProblem {
    pub fn validate(&self) -> Result<(), QpError> {
        let all_finite = self.u_nom.iter().chain(&self.w).chain(&self.u_min).chain(&self.u_max).all(|v| v.is_finite())
            && self.rho.is_finite()
            && self.rows.iter().all(|r| r.a.iter().all(|v| v.is_finite()) && r.b.is_finite());
        if !all_finite {
            return Err(QpError::Invalid("non-finite data".into()));
        }
        if self.w.iter().any(|&w| w <= 0.0) {
            return Err(QpError::Invalid("W must be positive".into()));
        }
        if self.rho <= 0.0 {
            return Err(QpError::Invalid("rho must be positive".into()));
        }
        if (0..2).any(|j| self.u_min[j] >= self.u_max[j]) {
            return Err(QpError::Invalid("u_min must be below u_max".into()));
        }
        if self.rows.len() > MAX_ROWS {
            return Err(QpError::Invalid(format!("at most {MAX_ROWS} rows")));
        }
        Ok(())
    }

    /// Objective with the optimal slack for this `u`.
    pub fn reduced_objective(&self, u: [f64; 2]) -> f64 {
        let mut obj = 0.0;
        for j in 0..2 {
            let d = u[j] - self.u_nom[j];
            obj += 0.5 * self.w[j] * d * d;
        }
        for r in &self.rows {
            let xi = (r.b - dot(r.a, u)).max(0.0);
            obj += 0.5 * self.rho * xi * xi;
        }
        obj
    }

    /// Gradient of [`Self::reduced_objective`].
    fn gradient(&self, u: [f64; 2]) -> [f64; 2] {
        let mut g = [self.w[0] * (u[0] - self.u_nom[0]), self.w[1] * (u[1] - self.u_nom[1])];
        for r in &self.rows {
            let xi = (r.b - dot(r.a, u)).max(0.0);
            g[0] -= self.rho * xi * r.a[0];
            g[1] -= self.rho * xi * r.a[1];
        }
        g
    }

    /// KKT violation of `u` for the reduced problem. Residuals are measured
    /// relative to the magnitude of the terms that cancel in stationarity.
    pub fn kkt_residual(&self, u: [f64; 2]) -> f64 {
        let g = self.gradient(u);
        let mut res: f64 = 0.0;
        for j in 0..2 {
            let mut scale = 1.0 + (self.w[j] * (u[j] - self.u_nom[j])).abs();
            for r in &self.rows {
                scale += (self.rho * (r.b - dot(r.a, u)).max(0.0) * r.a[j]).abs();
            }
            let range = self.u_max[j] - self.u_min[j];
            let primal = (self.u_min[j] - u[j]).max(u[j] - self.u_max[j]).max(0.0) / range;
            let at_lower = u[j] <= self.u_min[j];
            let at_upper = u[j] >= self.u_max[j];
            // Box multiplier sign: at the lower bound the gradient may point
            // inward (≥ 0), at the upper bound (≤ 0).
            let stat = if at_lower {
                (-g[j]).max(0.0)
            } else if at_upper {
                g[j].max(0.0)
            } else {
                g[j].abs()
            };
            res = res.max(stat / scale).max(primal);
        }
        res
    }
}

fn dot(a: [f64; 2], u: [f64; 2]) -> f64 {
    a[0] * u[0] + a[1] * u[1]
}

#[derive(Clone, Copy)]
enum Face {
    Lower,
    Upper,
    Free,
}

/// Minimizer of the quadratic piece defined by `faces` and the penalized
/// `active` rows, or `None` when its Hessian is singular.
///
/// Solved for the displacement `d = u − u_nom` with the 2×2 determinant and
/// adjugate expanded so that the ρ² terms never cancel numerically (the
/// Lagrange identity for `det(W + ρ Σ aaᵀ)`).
fn solve_piece(p: &QpProblem, faces: [Face; 2], active: u32) -> Option<[f64; 2]> {
    let rows: Vec<&QpRow> = p
        .rows
        .iter()
        .enumerate()
        .filter(|(i, _)| active & (1 << i) != 0)
        .map(|(_, r)| r)
        .collect();
    let mut d = [0.0; 2];
    let mut free = Vec::with_capacity(2);
    for j in 0..2 {
        match faces[j] {
            Face::Lower => d[j] = p.u_min[j] - p.u_nom[j],
            Face::Upper => d[j] = p.u_max[j] - p.u_nom[j],
            Face::Free => free.push(j),
        }
    }
    // Residual of each active row at u_nom + (fixed part of d).
    let resid: Vec<f64> = rows
        .iter()
        .map(|r| r.b - dot(r.a, p.u_nom) - dot(r.a, d))
        .collect();
    let rho = p.rho;
    match free.as_slice() {
        [] => {}
        [j] => {
            let j = *j;
            let num: f64 = rows.iter().zip(&resid).map(|(r, e)| r.a[j] * e).sum();
            let den: f64 = p.w[j] + rho * rows.iter().map(|r| r.a[j] * r.a[j]).sum::<f64>();
            if den <= 0.0 {
                return None;
            }
            d[j] = rho * num / den;
        }
        _ => {
            let (w0, w1) = (p.w[0], p.w[1]);
            let s00: f64 = rows.iter().map(|r| r.a[0] * r.a[0]).sum();
            let s11: f64 = rows.iter().map(|r| r.a[1] * r.a[1]).sum();
            let mut cross = 0.0;
            let mut n0 = 0.0;
            let mut n1 = 0.0;
            for (i, ri) in rows.iter().enumerate() {
                for (k, rk) in rows.iter().enumerate() {
                    let m = rk.a[1] * ri.a[0] - rk.a[0] * ri.a[1];
                    if k > i {
                        cross += m * m;
                    }
                    n0 += rk.a[1] * resid[i] * m;
                    n1 -= rk.a[0] * resid[i] * m;
                }
            }
            let b0: f64 = rows.iter().zip(&resid).map(|(r, e)| r.a[0] * e).sum();
            let b1: f64 = rows.iter().zip(&resid).map(|(r, e)| r.a[1] * e).sum();
            let det = w0 * w1 + rho * (w0 * s11 + w1 * s00) + rho * rho * cross;
            if det <= 0.0 || !det.is_finite() {
                return None;
            }
            d[0] = (w1 * rho * b0 + rho * rho * n0) / det;
            d[1] = (w0 * rho * b1 + rho * rho * n1) / det;
        }
    }
    let mut u = [p.u_nom[0] + d[0], p.u_nom[1] + d[1]];
    for j in 0..2 {
        match faces[j] {
            Face::Lower => u[j] = p.u_min[j],
            Face::Upper => u[j] = p.u_max[j],
            Face::Free => {}
        }
    }
    Some(u)
}

fn piece_is_consistent(p: &QpProblem, u: [f64; 2], active: u32) -> bool {
    for j in 0..2 {
        let tol = FEAS_TOL * (1.0 + p.u_min[j].abs().max(p.u_max[j].abs()));
        if !(u[j] >= p.u_min[j] - tol && u[j] <= p.u_max[j] + tol) {
            return false;
        }
    }
    p.rows.iter().enumerate().all(|(i, r)| {
        let gap = dot(r.a, u) - r.b;
        let tol = FEAS_TOL * (1.0 + r.b.abs() + r.a[0].abs() * u[0].abs() + r.a[1].abs() * u[1].abs());
        if active & (1 << i) != 0 {
            gap <= tol
        } else {
            gap >= -tol
        }
    })
}

pub fn solve(p: &QpProblem) -> QpSolution {
    if p.validate().is_err() {
        return QpSolution::failure(p);
    }
    const FACES: [Face; 3] = [Face::Lower, Face::Upper, Face::Free];
    let mut best: Option<([f64; 2], f64)> = None;
    for f0 in FACES {
        for f1 in FACES {
            for active in 0..(1u32 << p.rows.len()) {
                let Some(mut u) = solve_piece(p, [f0, f1], active) else {
                    continue;
                };
                if !piece_is_consistent(p, u, active) {
                    continue;
                }
                for j in 0..2 {
                    u[j] = u[j].clamp(p.u_min[j], p.u_max[j]);
                }
                let obj = p.reduced_objective(u);
                if !obj.is_finite() {
                    continue;
                }
                if best.is_none_or(|(_, b)| obj < b) {
                    best = Some((u, obj));
                }
            }
        }
    }
    let Some((u, objective)) = best else {
        return QpSolution::failure(p);
    };
    QpSolution {
        u_star: u,
        xi_star: p.rows.iter().map(|r| (r.b - dot(r.a, u)).max(0.0)).collect(),
        objective,
        status: QpStatus::Optimal,
        kkt_residual: p.kkt_residual(u),
    }
}

/// Solves `p` (stated in physical units) in scaled variables `v = S u` with
/// weights `Λ`, i.e. with effective `W = SᵀΛS`. The returned solution is in
/// physical units; its objective is the physical-unit objective.
pub fn solve_scaled(p: &QpProblem, s: [f64; 2], lambda: [f64; 2]) -> QpSolution {
    let scaled = QpProblem {
        u_nom: [s[0] * p.u_nom[0], s[1] * p.u_nom[1]],
        w: lambda,
        rho: p.rho,
        rows: p
            .rows
            .iter()
            .map(|r| QpRow {
                a: [r.a[0] / s[0], r.a[1] / s[1]],
                b: r.b,
            })
            .collect(),
        u_min: [s[0] * p.u_min[0], s[1] * p.u_min[1]],
        u_max: [s[0] * p.u_max[0], s[1] * p.u_max[1]],
    };
    let mut sol = solve(&scaled);
    if sol.status == QpStatus::Optimal {
        sol.u_star = [
            (sol.u_star[0] / s[0]).clamp(p.u_min[0], p.u_max[0]),
            (sol.u_star[1] / s[1]).clamp(p.u_min[1], p.u_max[1]),
        ];
    }
    sol
}
