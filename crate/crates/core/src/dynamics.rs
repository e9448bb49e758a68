//! Control-affine dynamic single-track (bicycle) model.
//!
//! Body-frame state `[v_x, v_y, omega, delta]`, input `[delta_dot, F_x]`.
//! Lateral tire forces follow a lateral-only Magic Formula whose stiffness
//! factors are derived from the identified cornering stiffnesses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid vehicle parameter {name} = {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("invalid actuator bounds: {0}")]
    InvalidBounds(String),
    #[error("wheel angles imply turn radii that disagree by {0:.1}%")]
    InconsistentWheelAngles(f64),
}

/// Physical parameters of the single-track model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Mass (kg).
    pub m: f64,
    /// Yaw inertia (kg m²).
    pub i_z: f64,
    /// CG to front axle (m).
    pub l_f: f64,
    /// CG to rear axle (m).
    pub l_r: f64,
    /// Front cornering stiffness (N/rad).
    pub c_f: f64,
    /// Rear cornering stiffness (N/rad).
    pub c_r: f64,
    pub mu: f64,
    /// Magic Formula shape factor `C`.
    pub c_shape: f64,
    /// Magic Formula curvature factor `E`.
    pub e_curv: f64,
    pub g_accel: f64,
    /// Low-speed safeguard on `v_x` used in the slip angles (m/s).
    pub v_eps: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 2000.0,
            i_z: 3500.0,
            l_f: 1.4,
            l_r: 1.6,
            c_f: 80_000.0,
            c_r: 90_000.0,
            mu: 1.0,
            c_shape: 1.3,
            e_curv: 0.97,
            g_accel: 9.81,
            v_eps: 0.1,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("m", self.m),
            ("i_z", self.i_z),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("c_f", self.c_f),
            ("c_r", self.c_r),
            ("mu", self.mu),
            ("c_shape", self.c_shape),
            ("v_eps", self.v_eps),
            ("g_accel", self.g_accel),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(DynamicsError::InvalidParam { name, value });
            }
        }
        if !(self.e_curv > -10.0 && self.e_curv <= 1.0) {
            return Err(DynamicsError::InvalidParam {
                name: "e_curv",
                value: self.e_curv,
            });
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    /// Per-axle peak force `D = mu * m * g / 2`.
    pub fn peak_force(&self) -> f64 {
        self.mu * self.m * self.g_accel / 2.0
    }

    /// Stiffness factors `(B_f, B_r)` with `B = C_axle / (C * D)`.
    pub fn stiffness_factors(&self) -> (f64, f64) {
        let cd = self.c_shape * self.peak_force();
        (self.c_f / cd, self.c_r / cd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyState {
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
    pub delta: f64,
}

impl BodyState {
    pub const fn new(v_x: f64, v_y: f64, omega: f64, delta: f64) -> Self {
        Self {
            v_x,
            v_y,
            omega,
            delta,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.v_x, self.v_y, self.omega, self.delta]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Lateral mirror: negates `v_y`, `omega` and `delta`.
    pub fn mirrored(self) -> Self {
        Self::new(self.v_x, -self.v_y, -self.omega, -self.delta)
    }
}

/// World-frame pose plus body-frame dynamic state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldState {
    pub p_x: f64,
    pub p_y: f64,
    pub psi: f64,
    pub body: BodyState,
}

impl WorldState {
    pub fn new(p_x: f64, p_y: f64, psi: f64, body: BodyState) -> Self {
        Self {
            p_x,
            p_y,
            psi: wrap_angle(psi),
            body,
        }
    }

    pub fn position(&self) -> crate::geometry::Point2 {
        crate::geometry::Point2::new(self.p_x, self.p_y)
    }

    pub fn to_array(self) -> [f64; 7] {
        [
            self.p_x,
            self.p_y,
            self.psi,
            self.body.v_x,
            self.body.v_y,
            self.body.omega,
            self.body.delta,
        ]
    }

    /// Builds a state from `[p_x, p_y, psi, v_x, v_y, omega, delta]`, wrapping `psi`.
    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            p_x: a[0],
            p_y: a[1],
            psi: wrap_angle(a[2]),
            body: BodyState::new(a[3], a[4], a[5], a[6]),
        }
    }
}

/// Wraps an angle to `[-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if (-PI..=PI).contains(&a) {
        return a;
    }
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI && a > 0.0 {
        PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Steering rate (rad/s).
    pub delta_dot: f64,
    /// Longitudinal force (N).
    pub f_x: f64,
}

impl ControlInput {
    pub const fn new(delta_dot: f64, f_x: f64) -> Self {
        Self { delta_dot, f_x }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.delta_dot, self.f_x]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorBounds {
    pub delta_dot_min: f64,
    pub delta_dot_max: f64,
    pub f_x_min: f64,
    pub f_x_max: f64,
}

impl Default for ActuatorBounds {
    fn default() -> Self {
        Self {
            delta_dot_min: -1.0,
            delta_dot_max: 1.0,
            f_x_min: -11_979.0,
            f_x_max: 7_000.0,
        }
    }
}

impl ActuatorBounds {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.delta_dot_min < self.delta_dot_max) {
            return Err(DynamicsError::InvalidBounds(
                "delta_dot_min must be < delta_dot_max".into(),
            ));
        }
        if !(self.f_x_min < self.f_x_max) {
            return Err(DynamicsError::InvalidBounds(
                "f_x_min must be < f_x_max".into(),
            ));
        }
        if !(self.f_x_min < 0.0) {
            return Err(DynamicsError::InvalidBounds(
                "f_x_min must be negative (braking)".into(),
            ));
        }
        Ok(())
    }

    pub fn lower(&self) -> [f64; 2] {
        [self.delta_dot_min, self.f_x_min]
    }

    pub fn upper(&self) -> [f64; 2] {
        [self.delta_dot_max, self.f_x_max]
    }

    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput::new(
            u.delta_dot.clamp(self.delta_dot_min, self.delta_dot_max),
            u.f_x.clamp(self.f_x_min, self.f_x_max),
        )
    }

    /// Full braking with zero steering rate.
    pub fn emergency_brake(&self) -> ControlInput {
        ControlInput::new(0.0, self.f_x_min)
    }
}

/// 4×2 control-effectiveness matrix, row-major.
pub type ControlMatrix = [[f64; 2]; 4];

/// Front and rear slip angles `(alpha_f, alpha_r)`.
pub fn slip_angles(s: &BodyState, r: &VehicleParams) -> (f64, f64) {
    let sign = if s.v_x < 0.0 { -1.0 } else { 1.0 };
    let v_safe = sign * s.v_x.abs().max(r.v_eps);
    let alpha_f = (s.v_y + r.l_f * s.omega).atan2(v_safe) - s.delta;
    let alpha_r = (s.v_y - r.l_r * s.omega).atan2(v_safe);
    (alpha_f, alpha_r)
}

/// Lateral Magic Formula force; positive slip gives negative force.
pub fn lateral_force(alpha: f64, b_axle: f64, r: &VehicleParams) -> f64 {
    let d = r.peak_force();
    let ba = b_axle * alpha;
    -d * (r.c_shape * (ba - r.e_curv * (ba - ba.atan())).atan()).sin()
}

/// `(F_yf, F_yr)` at the current state.
pub fn tire_forces(s: &BodyState, r: &VehicleParams) -> (f64, f64) {
    let (alpha_f, alpha_r) = slip_angles(s, r);
    let (b_f, b_r) = r.stiffness_factors();
    (lateral_force(alpha_f, b_f, r), lateral_force(alpha_r, b_r, r))
}

/// Drift vector field `f_phys`.
pub fn drift(s: &BodyState, r: &VehicleParams) -> [f64; 4] {
    let (f_yf, f_yr) = tire_forces(s, r);
    let (sin_d, cos_d) = s.delta.sin_cos();
    [
        -f_yf * sin_d / r.m + s.v_y * s.omega,
        (f_yr + f_yf * cos_d) / r.m - s.v_x * s.omega,
        (r.l_f * f_yf * cos_d - r.l_r * f_yr) / r.i_z,
        0.0,
    ]
}

/// Control-effectiveness matrix `g_phys`.
pub fn control_matrix(s: &BodyState, r: &VehicleParams) -> ControlMatrix {
    let (sin_d, cos_d) = s.delta.sin_cos();
    [
        [0.0, cos_d / r.m],
        [0.0, sin_d / r.m],
        [0.0, r.l_f * sin_d / r.i_z],
        [1.0, 0.0],
    ]
}

/// `f + g u`, evaluated in a fixed order so that every control-affine model
/// shares the same floating-point path.
pub fn affine_combine(f: &[f64; 4], g: &ControlMatrix, u: &ControlInput) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = f[i] + (g[i][0] * u.delta_dot + g[i][1] * u.f_x);
    }
    out
}

/// Analytical body-frame derivative.
pub fn derivative(s: &BodyState, u: &ControlInput, r: &VehicleParams) -> [f64; 4] {
    affine_combine(&drift(s, r), &control_matrix(s, r), u)
}

/// Equivalent single-track steering angle from the two front wheel angles.
///
/// Each wheel implies a turn radius at the axle midline
/// (`L cot(inner) + w/2` and `L cot(outer) - w/2`); the result uses the mean
/// of `cot(inner)` and `cot(outer)`. Radii that disagree by more than 10%
/// are rejected.
pub fn ackermann_effective_delta(
    delta_inner: f64,
    delta_outer: f64,
    track_width: f64,
    wheelbase: f64,
) -> Result<f64, DynamicsError> {
    const TINY: f64 = 1e-12;
    if delta_inner.abs() < TINY && delta_outer.abs() < TINY {
        return Ok(0.0);
    }
    if delta_inner.abs() < TINY
        || delta_outer.abs() < TINY
        || delta_inner.signum() != delta_outer.signum()
    {
        return Err(DynamicsError::InconsistentWheelAngles(100.0));
    }
    let sign = delta_inner.signum();
    let cot_i = 1.0 / delta_inner.abs().tan();
    let cot_o = 1.0 / delta_outer.abs().tan();
    let r_inner = wheelbase * cot_i + track_width / 2.0;
    let r_outer = wheelbase * cot_o - track_width / 2.0;
    let r_center = 0.5 * (r_inner + r_outer);
    let disagreement = (r_inner - r_outer).abs() / r_center.abs().max(TINY);
    if disagreement > 0.10 {
        return Err(DynamicsError::InconsistentWheelAngles(disagreement * 100.0));
    }
    Ok(sign * (wheelbase / r_center).atan())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn slip_angles_examples() {
        let r = params();
        assert_eq!(slip_angles(&BodyState::new(10.0, 0.0, 0.0, 0.0), &r), (0.0, 0.0));
        let (af, ar) = slip_angles(&BodyState::new(10.0, 0.0, 0.0, 0.1), &r);
        assert!((af + 0.1).abs() < 1e-15 && ar == 0.0);
        let (_, ar) = slip_angles(&BodyState::new(0.0, 0.5, 0.0, 0.0), &r);
        assert!((ar - 0.5f64.atan2(0.1)).abs() < 1e-15);
        assert!((ar - 1.373_400_766_945_015_9).abs() < 1e-12);
    }

    #[test]
    fn lateral_force_slope_and_bound() {
        let r = params();
        let (b_f, b_r) = r.stiffness_factors();
        assert_eq!(lateral_force(0.0, b_f, &r), 0.0);
        let h = 1e-6;
        let slope_f = (lateral_force(h, b_f, &r) - lateral_force(-h, b_f, &r)) / (2.0 * h);
        let slope_r = (lateral_force(h, b_r, &r) - lateral_force(-h, b_r, &r)) / (2.0 * h);
        assert!((slope_f + r.c_f).abs() / r.c_f < 1e-3);
        assert!((slope_r + r.c_r).abs() / r.c_r < 1e-3);
        let bound = r.peak_force() * (r.c_shape * std::f64::consts::FRAC_PI_2).sin().abs();
        for k in 0..=10_000 {
            let a = k as f64 * 1e-4;
            assert!(lateral_force(a, b_f, &r).abs() <= r.peak_force() + 1e-9);
            // Beyond the peak the curve stays under D; sin(C pi/2) bounds the tail.
            if a > 0.5 {
                assert!(lateral_force(a, b_f, &r).abs() <= r.peak_force());
            }
        }
        assert!(bound <= r.peak_force());
    }

    #[test]
    fn drift_examples() {
        let r = params();
        assert_eq!(drift(&BodyState::new(10.0, 0.0, 0.0, 0.0), &r), [0.0; 4]);
        let s = BodyState::new(10.0, 0.0, 0.0, 0.1);
        let f = drift(&s, &r);
        // Independent evaluation, term by term.
        let (b_f, _) = r.stiffness_factors();
        let d = r.mu * r.m * r.g_accel / 2.0;
        let x = b_f * -0.1;
        let f_yf = -d * (r.c_shape * (x - r.e_curv * (x - x.atan())).atan()).sin();
        assert!(f_yf > 0.0);
        assert!((f[0] - (-f_yf * 0.1f64.sin() / r.m)).abs() < 1e-12);
        assert!((f[1] - f_yf * 0.1f64.cos() / r.m).abs() < 1e-12);
        assert!((f[2] - r.l_f * f_yf * 0.1f64.cos() / r.i_z).abs() < 1e-12);
        assert_eq!(f[3], 0.0);
    }

    #[test]
    fn control_matrix_examples() {
        let r = params();
        let g = control_matrix(&BodyState::new(3.0, 1.0, 0.2, 0.0), &r);
        assert_eq!([g[0][1], g[1][1], g[2][1], g[3][1]], [1.0 / r.m, 0.0, 0.0, 0.0]);
        let delta = std::f64::consts::FRAC_PI_6;
        let g = control_matrix(&BodyState::new(0.0, 0.0, 0.0, delta), &r);
        assert_eq!(g[3], [1.0, 0.0]);
        assert!((g[0][1] - delta.cos() / 2000.0).abs() < 1e-18);
        assert!((g[1][1] - delta.sin() / 2000.0).abs() < 1e-18);
        assert!((g[2][1] - 1.4 * delta.sin() / 3500.0).abs() < 1e-18);
    }

    #[test]
    fn ackermann_examples() {
        assert_eq!(ackermann_effective_delta(0.0, 0.0, 1.6, 2.8).unwrap(), 0.0);
        let d = ackermann_effective_delta(0.2, 0.2, 0.0, 2.8).unwrap();
        assert!((d - 0.2).abs() < 1e-12);

        // Geometric round trip: derive the outer angle from the inner one.
        let (l, w, inner): (f64, f64, f64) = (2.8, 1.6, 0.30);
        let r_mid = l / inner.tan() + w / 2.0;
        let outer = (l / (r_mid + w / 2.0)).atan();
        let delta = ackermann_effective_delta(inner, outer, w, l).unwrap();
        let r_out = l / delta.tan();
        assert!((r_out - r_mid).abs() < 1e-9);
        assert!(((l / (r_out - w / 2.0)).atan() - inner).abs() < 1e-9);
        assert!(((l / (r_out + w / 2.0)).atan() - outer).abs() < 1e-9);
        // Mirrored turn.
        let neg = ackermann_effective_delta(-inner, -outer, w, l).unwrap();
        assert!((neg + delta).abs() < 1e-15);
    }

    #[test]
    fn ackermann_rejects_inconsistent() {
        assert!(matches!(
            ackermann_effective_delta(0.3, 0.05, 1.6, 2.8),
            Err(DynamicsError::InconsistentWheelAngles(_))
        ));
        assert!(ackermann_effective_delta(0.3, -0.3, 1.6, 2.8).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(params().validate().is_ok());
        let bad = VehicleParams {
            e_curv: 1.5,
            ..params()
        };
        assert!(bad.validate().is_err());
        let bad = VehicleParams {
            m: 0.0,
            ..params()
        };
        assert!(bad.validate().is_err());
        assert!(ActuatorBounds::default().validate().is_ok());
        let b = ActuatorBounds {
            f_x_min: 10.0,
            ..ActuatorBounds::default()
        };
        assert!(b.validate().is_err());
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(0.5), 0.5);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    fn body() -> impl Strategy<Value = BodyState> {
        (-5.0..35.0f64, -3.0..3.0f64, -1.5..1.5f64, -0.6..0.6f64)
            .prop_map(|(a, b, c, d)| BodyState::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn derivative_is_affine(s in body(), a in -1.0..1.0f64, b in -1e4..7e3f64,
                                c in -1.0..1.0f64, d in -1e4..7e3f64) {
            let r = params();
            let u1 = ControlInput::new(a, b);
            let sum = ControlInput::new(a + c, b + d);
            let g = control_matrix(&s, &r);
            let lhs = derivative(&s, &sum, &r);
            let base = derivative(&s, &u1, &r);
            for i in 0..4 {
                let gu2 = g[i][0] * c + g[i][1] * d;
                prop_assert!((lhs[i] - base[i] - gu2).abs() < 1e-12);
            }
        }

        #[test]
        fn drift_lateral_symmetry(s in body()) {
            let r = params();
            let f = drift(&s, &r);
            let fm = drift(&s.mirrored(), &r);
            prop_assert!((f[0] - fm[0]).abs() <= 1e-9);
            prop_assert!((f[1] + fm[1]).abs() <= 1e-9);
            prop_assert!((f[2] + fm[2]).abs() <= 1e-9);
        }

        #[test]
        fn forces_saturate(alpha in -20.0..20.0f64) {
            let r = params();
            let (b_f, b_r) = r.stiffness_factors();
            prop_assert!(lateral_force(alpha, b_f, &r).abs() <= r.peak_force());
            prop_assert!(lateral_force(alpha, b_r, &r).abs() <= r.peak_force());
        }
    }
}
