//! Zero-order-hold integrators over the 7-component world state.

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, BodyState, ControlInput, WorldState};
use crate::models::DynamicsModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum IntegratorScheme {
    #[default]
    Rk4,
    SemiImplicitEuler,
}

/// `(ṗ_x, ṗ_y)` from body velocities rotated by `psi`.
#[inline]
pub fn rotate(psi: f64, v_x: f64, v_y: f64) -> (f64, f64) {
    let (s, c) = psi.sin_cos();
    (c * v_x - s * v_y, s * v_x + c * v_y)
}

/// Full 7-state derivative given a body-frame derivative provider.
#[inline]
pub fn pose_augmented(x: &[f64; 7], body_deriv: [f64; 4]) -> [f64; 7] {
    let (dx, dy) = rotate(x[2], x[3], x[4]);
    [dx, dy, x[5], body_deriv[0], body_deriv[1], body_deriv[2], body_deriv[3]]
}

pub fn full_derivative(m: &DynamicsModel, x: &WorldState, u: &ControlInput) -> [f64; 7] {
    pose_augmented(&x.to_array(), m.derivative(&x.body, u))
}

/// One classical RK4 step on an arbitrary fixed-size system.
#[inline]
pub fn rk4_generic<const N: usize, F: Fn(&[f64; N]) -> [f64; N]>(x: &[f64; N], dt: f64, f: F) -> [f64; N] {
    let add = |a: &[f64; N], k: &[f64; N], h: f64| -> [f64; N] {
        let mut o = *a;
        for i in 0..N {
            o[i] += h * k[i];
        }
        o
    };
    let k1 = f(x);
    let k2 = f(&add(x, &k1, 0.5 * dt));
    let k3 = f(&add(x, &k2, 0.5 * dt));
    let k4 = f(&add(x, &k3, dt));
    let mut out = *x;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

pub fn rk4_step(m: &DynamicsModel, x: &WorldState, u: &ControlInput, dt: f64) -> WorldState {
    let next = rk4_generic(&x.to_array(), dt, |s| {
        let body = BodyState::new(s[3], s[4], s[5], s[6]);
        pose_augmented(s, m.derivative(&body, u))
    });
    WorldState::from_array(next)
}

/// Velocity-then-position update: body states first, pose with the new
/// velocities.
pub fn semi_implicit_step(m: &DynamicsModel, x: &WorldState, u: &ControlInput, dt: f64) -> WorldState {
    let d = m.derivative(&x.body, u);
    let b = &x.body;
    let body = BodyState::new(
        b.v_x + dt * d[0],
        b.v_y + dt * d[1],
        b.omega + dt * d[2],
        b.delta + dt * d[3],
    );
    let (dx, dy) = rotate(x.psi, body.v_x, body.v_y);
    WorldState {
        p_x: x.p_x + dt * dx,
        p_y: x.p_y + dt * dy,
        psi: wrap_angle(x.psi + dt * body.omega),
        body,
    }
}

pub fn step(m: &DynamicsModel, x: &WorldState, u: &ControlInput, dt: f64, scheme: IntegratorScheme) -> WorldState {
    match scheme {
        IntegratorScheme::Rk4 => rk4_step(m, x, u, dt),
        IntegratorScheme::SemiImplicitEuler => semi_implicit_step(m, x, u, dt),
    }
}

/// `n_sub` steps of `tau / n_sub` with `u` held constant.
pub fn rollout_zoh(
    m: &DynamicsModel,
    x0: &WorldState,
    u: &ControlInput,
    tau: f64,
    n_sub: usize,
    scheme: IntegratorScheme,
) -> WorldState {
    let n = n_sub.max(1);
    let dt = tau / n as f64;
    let mut x = *x0;
    for _ in 0..n {
        x = step(m, &x, u, dt, scheme);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VehicleParams;
    use crate::models::{Mlp, MlpSpec};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn zero_dynamics() -> DynamicsModel {
        DynamicsModel::neural_ode(Mlp::zeros(MlpSpec::new(6, &[4], 4, false)).unwrap()).unwrap()
    }

    fn analytical() -> DynamicsModel {
        DynamicsModel::analytical(VehicleParams::default()).unwrap()
    }

    /// Body derivative equal to the input steering rate only.
    fn steer_only() -> DynamicsModel {
        let mut net = Mlp::zeros(MlpSpec::new(6, &[], 4, false)).unwrap();
        net.layers[0].weight[3 * 6 + 4] = 1.0;
        DynamicsModel::neural_ode(net).unwrap()
    }

    #[test]
    fn pose_derivative_rotation() {
        let m = zero_dynamics();
        let u = ControlInput::default();
        let d = full_derivative(&m, &WorldState::new(0.0, 0.0, 0.0, BodyState::new(5.0, 0.0, 0.0, 0.0)), &u);
        assert_eq!((d[0], d[1]), (5.0, 0.0));
        let d = full_derivative(&m, &WorldState::new(0.0, 0.0, FRAC_PI_2, BodyState::new(5.0, 0.0, 0.0, 0.0)), &u);
        assert!(d[0].abs() < 1e-12 && (d[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rk4_exact_on_linear_states() {
        let m = steer_only();
        let x = WorldState::new(0.0, 0.0, 0.0, BodyState::new(0.0, 0.0, 0.0, 0.1));
        let y = rk4_step(&m, &x, &ControlInput::new(0.2, 0.0), 0.05);
        assert!((y.body.delta - (0.1 + 0.2 * 0.05)).abs() < 1e-15);
        let coast = WorldState::new(0.0, 0.0, 0.0, BodyState::new(10.0, 0.0, 0.0, 0.0));
        let y = rk4_step(&analytical(), &coast, &ControlInput::default(), 0.1);
        assert_eq!(y.p_x, 1.0);
    }

    #[test]
    fn semi_implicit_examples() {
        let m = zero_dynamics();
        let x = WorldState::new(1.0, 2.0, 0.0, BodyState::new(3.0, 0.0, 0.0, 0.2));
        let y = semi_implicit_step(&m, &x, &ControlInput::default(), 0.1);
        assert_eq!(y.body, x.body);
        assert!((y.p_x - 1.3).abs() < 1e-15 && y.p_y == 2.0);
        let y = semi_implicit_step(&steer_only(), &x, &ControlInput::new(1.0, 0.0), 0.1);
        assert_eq!(y.body.delta, 0.2 + 0.1);
    }

    #[test]
    fn rollout_composition() {
        let m = analytical();
        let x = WorldState::new(0.0, 0.0, 0.3, BodyState::new(12.0, 0.1, 0.05, 0.02));
        let u = ControlInput::new(0.2, -1000.0);
        for scheme in [IntegratorScheme::Rk4, IntegratorScheme::SemiImplicitEuler] {
            let mut y = x;
            for _ in 0..3 {
                y = step(&m, &y, &u, 0.3 / 3.0, scheme);
            }
            assert_eq!(rollout_zoh(&m, &x, &u, 0.3, 3, scheme), y);
            assert_eq!(rollout_zoh(&m, &x, &u, 0.1, 1, scheme), step(&m, &x, &u, 0.1, scheme));
        }
    }

    #[test]
    fn coarse_preview_close_to_fine() {
        let m = analytical();
        let x = WorldState::new(0.0, 0.0, 0.0, BodyState::new(15.0, 0.0, 0.0, 0.0));
        let u = ControlInput::new(0.2, -3000.0);
        let a = rollout_zoh(&m, &x, &u, 0.3, 3, IntegratorScheme::SemiImplicitEuler);
        let b = rollout_zoh(&m, &x, &u, 0.3, 300, IntegratorScheme::SemiImplicitEuler);
        // Semi-implicit Euler under constant deceleration a lags the exact
        // position by a*dt*tau/2 = 1.5 * 0.1 * 0.3 / 2 = 2.25 cm.
        let gap = a.position().sub(b.position()).norm();
        let bound = 0.5 * 1.5 * 0.1 * 0.3;
        assert!((gap - bound).abs() < 0.1 * bound, "gap {gap}");
    }

    #[test]
    fn orders_on_circle() {
        // Steady body state: the pose traces an exact circle.
        let m = zero_dynamics();
        let (v, w) = (10.0, 0.5);
        let x0 = WorldState::new(0.0, 0.0, 0.0, BodyState::new(v, 0.0, w, 0.0));
        let t = 4.0;
        let exact = (v / w * (w * t).sin(), v / w * (1.0 - (w * t).cos()));
        let err = |dt: f64, scheme| {
            let n = (t / dt).round() as usize;
            let y = rollout_zoh(&m, &x0, &ControlInput::default(), t, n, scheme);
            ((y.p_x - exact.0).powi(2) + (y.p_y - exact.1).powi(2)).sqrt()
        };
        let dts = [0.2, 0.1, 0.05, 0.025];
        for i in 0..3 {
            let r = err(dts[i], IntegratorScheme::Rk4) / err(dts[i + 1], IntegratorScheme::Rk4);
            assert!((r - 16.0).abs() <= 0.2 * 16.0, "rk4 ratio {r}");
            let r = err(dts[i], IntegratorScheme::SemiImplicitEuler)
                / err(dts[i + 1], IntegratorScheme::SemiImplicitEuler);
            assert!((r - 2.0).abs() <= 0.3 * 2.0, "semi-implicit ratio {r}");
        }
    }

    proptest! {
        #[test]
        fn rotation_is_isometry(psi in -10.0..10.0f64, vx in -30.0..30.0f64, vy in -5.0..5.0f64) {
            let (a, b) = rotate(psi, vx, vy);
            prop_assert!(((a * a + b * b).sqrt() - (vx * vx + vy * vy).sqrt()).abs() < 1e-9);
        }

        #[test]
        fn wrapping_does_not_change_positions(psi in -3.0..3.0f64, k in -3i32..3) {
            let m = analytical();
            let body = BodyState::new(8.0, 0.2, 0.1, 0.05);
            let a = WorldState { p_x: 0.0, p_y: 0.0, psi, body };
            let b = WorldState { psi: psi + 2.0 * std::f64::consts::PI * k as f64, ..a };
            let u = ControlInput::new(0.1, 500.0);
            let ya = rk4_step(&m, &a, &u, 0.05);
            let yb = rk4_step(&m, &b, &u, 0.05);
            prop_assert!((ya.p_x - yb.p_x).abs() < 1e-9 && (ya.p_y - yb.p_y).abs() < 1e-9);
            prop_assert!((ya.psi - yb.psi).abs() < 1e-9 || (ya.psi.abs() - std::f64::consts::PI).abs() < 1e-9);
        }

        #[test]
        fn deterministic(vx in 0.0..30.0f64, d in -0.4..0.4f64) {
            let m = analytical();
            let x = WorldState::new(1.0, 2.0, 0.3, BodyState::new(vx, 0.0, 0.0, d));
            let u = ControlInput::new(0.3, -2000.0);
            prop_assert_eq!(rk4_step(&m, &x, &u, 0.02), rk4_step(&m, &x, &u, 0.02));
        }
    }
}
