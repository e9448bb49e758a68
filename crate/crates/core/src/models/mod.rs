//! Derivative providers over the body state: the analytical bicycle model
//! and four learned variants.

mod mlp;
mod weights;

pub use mlp::{silu, silu_grad, ForwardCache, Linear, Mlp, MlpGrads, MlpSpec};
pub use weights::{load_weights, read_weights, save_weights, to_json, write_weights, WEIGHTS_MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    affine_combine, control_matrix, derivative, drift, BodyState, ControlInput, ControlMatrix,
    VehicleParams,
};

/// Scale applied to F_x before it enters the Residual / NeuralOde nets.
pub const FORCE_INPUT_SCALE: f64 = 1e-3;
/// The force column of the learned gain correction is emitted in kN⁻¹ units
/// and multiplied by this factor.
pub const GAIN_FORCE_SCALE: f64 = 1e-3;
/// Power iterations used when a model is loaded from disk.
pub const LOAD_POWER_ITERATIONS: usize = 50;
/// Standard deviation of the initial drift-head output layer.
pub const DRIFT_HEAD_INIT_STD: f64 = 1e-3;

const SHARED_OUTPUTS: usize = 10;
const GAIN_OUTPUTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("operation requires a PCARNN model")]
    WrongVariant,
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("unknown model variant tag {0}")]
    UnknownVariant(u32),
    #[error("weights file truncated")]
    Truncated,
    #[error("invalid vehicle parameters: {0}")]
    Params(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Analytical,
    Residual,
    NeuralOde,
    PcarnnShared,
    PcarnnSplit,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Analytical => 0,
            ModelKind::Residual => 1,
            ModelKind::NeuralOde => 2,
            ModelKind::PcarnnShared => 3,
            ModelKind::PcarnnSplit => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self, ModelError> {
        Ok(match tag {
            0 => ModelKind::Analytical,
            1 => ModelKind::Residual,
            2 => ModelKind::NeuralOde,
            3 => ModelKind::PcarnnShared,
            4 => ModelKind::PcarnnSplit,
            t => return Err(ModelError::UnknownVariant(t)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Analytical => "analytical",
            ModelKind::Residual => "residual",
            ModelKind::NeuralOde => "neural_ode",
            ModelKind::PcarnnShared => "pcarnn_shared",
            ModelKind::PcarnnSplit => "pcarnn_split",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ModelKind::Analytical,
            ModelKind::Residual,
            ModelKind::NeuralOde,
            ModelKind::PcarnnShared,
            ModelKind::PcarnnSplit,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    pub fn is_learned(self) -> bool {
        self != ModelKind::Analytical
    }

    pub fn is_pcarnn(self) -> bool {
        matches!(self, ModelKind::PcarnnShared | ModelKind::PcarnnSplit)
    }
}

/// Tagged union of derivative providers. Construct through the checked
/// constructors so that every evaluation path is shape-safe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DynamicsModel {
    Analytical(VehicleParams),
    Residual {
        params: VehicleParams,
        net: Mlp,
        force_input_scale: f64,
    },
    NeuralOde {
        net: Mlp,
        force_input_scale: f64,
    },
    PcarnnShared {
        params: VehicleParams,
        net: Mlp,
    },
    PcarnnSplit {
        params: VehicleParams,
        f_net: Mlp,
        g_net: Mlp,
    },
}

fn expect_io(net: &Mlp, input: usize, output: usize) -> Result<(), ModelError> {
    net.validate()?;
    if net.input_dim() != input {
        return Err(ModelError::ShapeMismatch {
            expected: input,
            got: net.input_dim(),
        });
    }
    if net.output_dim() != output {
        return Err(ModelError::ShapeMismatch {
            expected: output,
            got: net.output_dim(),
        });
    }
    Ok(())
}

fn check_params(p: &VehicleParams) -> Result<(), ModelError> {
    p.validate().map_err(|e| ModelError::Params(e.to_string()))
}

impl DynamicsModel {
    pub fn analytical(params: VehicleParams) -> Result<Self, ModelError> {
        check_params(&params)?;
        Ok(Self::Analytical(params))
    }

    pub fn residual(params: VehicleParams, net: Mlp) -> Result<Self, ModelError> {
        check_params(&params)?;
        expect_io(&net, 6, 4)?;
        Ok(Self::Residual {
            params,
            net,
            force_input_scale: FORCE_INPUT_SCALE,
        })
    }

    pub fn neural_ode(net: Mlp) -> Result<Self, ModelError> {
        expect_io(&net, 6, 4)?;
        Ok(Self::NeuralOde {
            net,
            force_input_scale: FORCE_INPUT_SCALE,
        })
    }

    pub fn pcarnn_shared(params: VehicleParams, net: Mlp) -> Result<Self, ModelError> {
        check_params(&params)?;
        expect_io(&net, 4, SHARED_OUTPUTS)?;
        Ok(Self::PcarnnShared { params, net })
    }

    pub fn pcarnn_split(params: VehicleParams, f_net: Mlp, g_net: Mlp) -> Result<Self, ModelError> {
        check_params(&params)?;
        expect_io(&f_net, 4, 4)?;
        expect_io(&g_net, 4, GAIN_OUTPUTS)?;
        Ok(Self::PcarnnSplit {
            params,
            f_net,
            g_net,
        })
    }

    /// Freshly initialized learned model with the given hidden widths.
    /// PCARNN gain heads start at exactly zero; drift / residual heads start
    /// small.
    pub fn initialized<R: Rng + ?Sized>(
        kind: ModelKind,
        params: VehicleParams,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        match kind {
            ModelKind::Analytical => Self::analytical(params),
            ModelKind::Residual => {
                let mut net = Mlp::random(MlpSpec::new(6, hidden, 4, false), rng)?;
                net.init_output_layer(DRIFT_HEAD_INIT_STD, rng);
                Self::residual(params, net)
            }
            ModelKind::NeuralOde => {
                let net = Mlp::random(MlpSpec::new(6, hidden, 4, false), rng)?;
                Self::neural_ode(net)
            }
            ModelKind::PcarnnShared => {
                let mut net = Mlp::random(MlpSpec::new(4, hidden, SHARED_OUTPUTS, true), rng)?;
                net.init_output_layer(DRIFT_HEAD_INIT_STD, rng);
                net.zero_output_rows(4..SHARED_OUTPUTS);
                net.spectral_normalize(LOAD_POWER_ITERATIONS);
                Self::pcarnn_shared(params, net)
            }
            ModelKind::PcarnnSplit => Self::initialized_split(params, hidden, hidden, rng),
        }
    }

    /// Split PCARNN with separate drift and gain network widths.
    pub fn initialized_split<R: Rng + ?Sized>(
        params: VehicleParams,
        f_hidden: &[usize],
        g_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut f_net = Mlp::random(MlpSpec::new(4, f_hidden, 4, false), rng)?;
        f_net.init_output_layer(DRIFT_HEAD_INIT_STD, rng);
        let mut g_net = Mlp::random(MlpSpec::new(4, g_hidden, GAIN_OUTPUTS, true), rng)?;
        g_net.init_output_layer(0.0, rng);
        g_net.spectral_normalize(LOAD_POWER_ITERATIONS);
        Self::pcarnn_split(params, f_net, g_net)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Analytical(_) => ModelKind::Analytical,
            Self::Residual { .. } => ModelKind::Residual,
            Self::NeuralOde { .. } => ModelKind::NeuralOde,
            Self::PcarnnShared { .. } => ModelKind::PcarnnShared,
            Self::PcarnnSplit { .. } => ModelKind::PcarnnSplit,
        }
    }

    /// Physics parameters, if the variant carries any.
    pub fn params(&self) -> Option<&VehicleParams> {
        match self {
            Self::Analytical(p)
            | Self::Residual { params: p, .. }
            | Self::PcarnnShared { params: p, .. }
            | Self::PcarnnSplit { params: p, .. } => Some(p),
            Self::NeuralOde { .. } => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut VehicleParams> {
        match self {
            Self::Analytical(p)
            | Self::Residual { params: p, .. }
            | Self::PcarnnShared { params: p, .. }
            | Self::PcarnnSplit { params: p, .. } => Some(p),
            Self::NeuralOde { .. } => None,
        }
    }

    pub fn force_input_scale(&self) -> f64 {
        match self {
            Self::Residual {
                force_input_scale, ..
            }
            | Self::NeuralOde {
                force_input_scale, ..
            } => *force_input_scale,
            _ => FORCE_INPUT_SCALE,
        }
    }

    /// Networks in a fixed order (shared/residual/ode: one; split: f then g).
    pub fn nets(&self) -> Vec<&Mlp> {
        match self {
            Self::Analytical(_) => vec![],
            Self::Residual { net, .. } | Self::NeuralOde { net, .. } | Self::PcarnnShared { net, .. } => {
                vec![net]
            }
            Self::PcarnnSplit { f_net, g_net, .. } => vec![f_net, g_net],
        }
    }

    pub fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        match self {
            Self::Analytical(_) => vec![],
            Self::Residual { net, .. } | Self::NeuralOde { net, .. } | Self::PcarnnShared { net, .. } => {
                vec![net]
            }
            Self::PcarnnSplit { f_net, g_net, .. } => vec![f_net, g_net],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.nets().iter().map(|n| n.parameter_count()).sum()
    }

    /// Re-applies spectral normalization on flagged networks.
    pub fn spectral_normalize(&mut self, iterations: usize) {
        for net in self.nets_mut() {
            net.spectral_normalize(iterations);
        }
    }

    /// Body-frame derivative `[v̇_x, v̇_y, ω̇, δ̇]`.
    pub fn derivative(&self, s: &BodyState, u: &ControlInput) -> [f64; 4] {
        match self {
            Self::Analytical(p) => derivative(s, u, p),
            Self::Residual {
                params,
                net,
                force_input_scale,
            } => {
                let base = derivative(s, u, params);
                let d = net
                    .forward(&net_input_6(s, u, *force_input_scale))
                    .expect("shape checked at construction");
                [base[0] + d[0], base[1] + d[1], base[2] + d[2], base[3] + d[3]]
            }
            Self::NeuralOde {
                net,
                force_input_scale,
            } => {
                let d = net
                    .forward(&net_input_6(s, u, *force_input_scale))
                    .expect("shape checked at construction");
                [d[0], d[1], d[2], d[3]]
            }
            Self::PcarnnShared { .. } | Self::PcarnnSplit { .. } => {
                let (f, g) = self.pcarnn_fg(s).expect("pcarnn variant");
                affine_combine(&f, &g, u)
            }
        }
    }

    /// Total drift and gain of a PCARNN model.
    pub fn pcarnn_fg(&self, s: &BodyState) -> Result<([f64; 4], ControlMatrix), ModelError> {
        let (params, df, dg) = match self {
            Self::PcarnnShared { params, net } => {
                let out = net.forward(&s.to_array())?;
                (params, [out[0], out[1], out[2], out[3]], gain_from(&out[4..SHARED_OUTPUTS]))
            }
            Self::PcarnnSplit {
                params,
                f_net,
                g_net,
            } => {
                let fo = f_net.forward(&s.to_array())?;
                let go = g_net.forward(&s.to_array())?;
                (params, [fo[0], fo[1], fo[2], fo[3]], gain_from(&go))
            }
            _ => return Err(ModelError::WrongVariant),
        };
        Ok(combine_fg(s, params, &df, &dg))
    }

    /// Squared-error loss `‖derivative(s,u) − target‖²` with its parameter
    /// gradients accumulated into `grads` (one entry per net, order of
    /// [`Self::nets`]). Returns the loss.
    pub fn loss_and_grad(
        &self,
        s: &BodyState,
        u: &ControlInput,
        target: &[f64; 4],
        grads: &mut [MlpGrads],
    ) -> f64 {
        match self {
            Self::Analytical(p) => {
                let d = derivative(s, u, p);
                sq_err(&d, target).0
            }
            Self::Residual {
                params,
                net,
                force_input_scale,
            } => {
                let base = derivative(s, u, params);
                let (out, cache) = net
                    .forward_cached(&net_input_6(s, u, *force_input_scale))
                    .expect("shape checked");
                let pred = [base[0] + out[0], base[1] + out[1], base[2] + out[2], base[3] + out[3]];
                let (loss, dl) = sq_err(&pred, target);
                net.backward(&cache, &dl, &mut grads[0]);
                loss
            }
            Self::NeuralOde {
                net,
                force_input_scale,
            } => {
                let (out, cache) = net
                    .forward_cached(&net_input_6(s, u, *force_input_scale))
                    .expect("shape checked");
                let (loss, dl) = sq_err(&[out[0], out[1], out[2], out[3]], target);
                net.backward(&cache, &dl, &mut grads[0]);
                loss
            }
            Self::PcarnnShared { params, net } => {
                let (out, cache) = net.forward_cached(&s.to_array()).expect("shape checked");
                let df = [out[0], out[1], out[2], out[3]];
                let (f, g) = combine_fg(s, params, &df, &gain_from(&out[4..]));
                let (loss, dl) = sq_err(&affine_combine(&f, &g, u), target);
                let mut dout = vec![0.0; SHARED_OUTPUTS];
                dout[..4].copy_from_slice(&dl);
                dout[4..].copy_from_slice(&gain_grad(&dl, u));
                net.backward(&cache, &dout, &mut grads[0]);
                loss
            }
            Self::PcarnnSplit {
                params,
                f_net,
                g_net,
            } => {
                let (fo, fc) = f_net.forward_cached(&s.to_array()).expect("shape checked");
                let (go, gc) = g_net.forward_cached(&s.to_array()).expect("shape checked");
                let df = [fo[0], fo[1], fo[2], fo[3]];
                let (f, g) = combine_fg(s, params, &df, &gain_from(&go));
                let (loss, dl) = sq_err(&affine_combine(&f, &g, u), target);
                f_net.backward(&fc, &dl, &mut grads[0]);
                g_net.backward(&gc, &gain_grad(&dl, u), &mut grads[1]);
                loss
            }
        }
    }

    pub fn zero_grads(&self) -> Vec<MlpGrads> {
        self.nets().iter().map(|n| MlpGrads::zeros_like(n)).collect()
    }
}

fn net_input_6(s: &BodyState, u: &ControlInput, force_scale: f64) -> [f64; 6] {
    [s.v_x, s.v_y, s.omega, s.delta, u.delta_dot, u.f_x * force_scale]
}

/// Maps the six gain outputs (rows 1–3, row-major) to a 4×2 correction.
fn gain_from(out: &[f64]) -> ControlMatrix {
    [
        [out[0], out[1] * GAIN_FORCE_SCALE],
        [out[2], out[3] * GAIN_FORCE_SCALE],
        [out[4], out[5] * GAIN_FORCE_SCALE],
        [0.0, 0.0],
    ]
}

/// Gradient of the loss w.r.t. the six gain outputs given `dL/dẋ`.
fn gain_grad(dl: &[f64; 4], u: &ControlInput) -> [f64; 6] {
    let c = u.f_x * GAIN_FORCE_SCALE;
    [
        dl[0] * u.delta_dot,
        dl[0] * c,
        dl[1] * u.delta_dot,
        dl[1] * c,
        dl[2] * u.delta_dot,
        dl[2] * c,
    ]
}

fn combine_fg(
    s: &BodyState,
    params: &VehicleParams,
    df: &[f64; 4],
    dg: &ControlMatrix,
) -> ([f64; 4], ControlMatrix) {
    let f0 = drift(s, params);
    let g0 = control_matrix(s, params);
    let f = [f0[0] + df[0], f0[1] + df[1], f0[2] + df[2], f0[3] + df[3]];
    let mut g = g0;
    for r in 0..3 {
        g[r][0] += dg[r][0];
        g[r][1] += dg[r][1];
    }
    g[3] = [1.0, 0.0];
    (f, g)
}

fn sq_err(pred: &[f64; 4], target: &[f64; 4]) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let e = pred[i] - target[i];
        loss += e * e;
        grad[i] = 2.0 * e;
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(99)
    }

    fn trained_like(kind: ModelKind) -> DynamicsModel {
        let mut r = rng();
        let mut m = DynamicsModel::initialized(kind, VehicleParams::default(), &[16, 16], &mut r).unwrap();
        // Perturb every weight so gain heads are nonzero.
        for net in m.nets_mut() {
            for l in &mut net.layers {
                for w in &mut l.weight {
                    *w += 0.05 * (r.random::<f64>() - 0.5);
                }
                for b in &mut l.bias {
                    *b += 0.05 * (r.random::<f64>() - 0.5);
                }
            }
        }
        m
    }

    #[test]
    fn analytical_coast_is_zero() {
        let m = DynamicsModel::analytical(VehicleParams::default()).unwrap();
        let d = m.derivative(&BodyState::new(10.0, 0.0, 0.0, 0.0), &ControlInput::new(0.0, 0.0));
        assert_eq!(d, [0.0; 4]);
    }

    #[test]
    fn zero_residual_heads_reproduce_analytical_bitwise() {
        let p = VehicleParams::default();
        let a = DynamicsModel::analytical(p).unwrap();
        let mut r = rng();
        let mut res = DynamicsModel::initialized(ModelKind::Residual, p, &[8], &mut r).unwrap();
        res.nets_mut()[0].init_output_layer(0.0, &mut r);
        let mut shared = DynamicsModel::initialized(ModelKind::PcarnnShared, p, &[8], &mut r).unwrap();
        shared.nets_mut()[0].init_output_layer(0.0, &mut r);
        let mut split = DynamicsModel::initialized(ModelKind::PcarnnSplit, p, &[8], &mut r).unwrap();
        split.nets_mut()[0].init_output_layer(0.0, &mut r);
        for _ in 0..100 {
            let s = BodyState::new(
                r.random_range(-5.0..30.0),
                r.random_range(-2.0..2.0),
                r.random_range(-1.0..1.0),
                r.random_range(-0.5..0.5),
            );
            let u = ControlInput::new(r.random_range(-1.0..1.0), r.random_range(-12000.0..7000.0));
            let d = a.derivative(&s, &u);
            assert_eq!(res.derivative(&s, &u), d);
            assert_eq!(shared.derivative(&s, &u), d);
            assert_eq!(split.derivative(&s, &u), d);
        }
    }

    #[test]
    fn fresh_pcarnn_gain_is_physical() {
        let p = VehicleParams::default();
        let mut r = rng();
        for kind in [ModelKind::PcarnnShared, ModelKind::PcarnnSplit] {
            let m = DynamicsModel::initialized(kind, p, &[12, 12], &mut r).unwrap();
            let s = BodyState::new(12.0, 0.3, 0.1, 0.05);
            let (_, g) = m.pcarnn_fg(&s).unwrap();
            assert_eq!(g, control_matrix(&s, &p));
        }
    }

    #[test]
    fn wrong_variant() {
        let m = DynamicsModel::analytical(VehicleParams::default()).unwrap();
        assert_eq!(
            m.pcarnn_fg(&BodyState::default()).unwrap_err(),
            ModelError::WrongVariant
        );
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        let p = VehicleParams::default();
        let net = Mlp::zeros(MlpSpec::new(4, &[5], 4, false)).unwrap();
        assert!(matches!(
            DynamicsModel::residual(p, net.clone()),
            Err(ModelError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            DynamicsModel::pcarnn_split(p, net.clone(), net),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let s = BodyState::new(11.0, 0.4, -0.2, 0.07);
        let u = ControlInput::new(0.3, -2500.0);
        let target = [0.5, -0.2, 0.1, 0.25];
        for kind in [
            ModelKind::Residual,
            ModelKind::NeuralOde,
            ModelKind::PcarnnShared,
            ModelKind::PcarnnSplit,
        ] {
            let m = trained_like(kind);
            let mut grads = m.zero_grads();
            m.loss_and_grad(&s, &u, &target, &mut grads);
            let h = 1e-6;
            for (ni, g) in grads.iter().enumerate() {
                for (li, gw) in g.weight.iter().enumerate() {
                    for idx in (0..gw.len()).step_by(7) {
                        let eval = |delta: f64| {
                            let mut mm = m.clone();
                            mm.nets_mut()[ni].layers[li].weight[idx] += delta;
                            let d = mm.derivative(&s, &u);
                            (0..4).map(|i| (d[i] - target[i]).powi(2)).sum::<f64>()
                        };
                        let fd = (eval(h) - eval(-h)) / (2.0 * h);
                        assert!(
                            (fd - gw[idx]).abs() <= 1e-5 * (1.0 + fd.abs()),
                            "{kind:?} net {ni} layer {li} idx {idx}: {fd} vs {}",
                            gw[idx]
                        );
                    }
                }
            }
        }
    }

    fn arb_body() -> impl Strategy<Value = BodyState> {
        (-5.0..35.0f64, -3.0..3.0f64, -1.5..1.5f64, -0.5..0.5f64)
            .prop_map(|(a, b, c, d)| BodyState::new(a, b, c, d))
    }

    fn arb_u() -> impl Strategy<Value = ControlInput> {
        (-1.0..1.0f64, -12000.0..7000.0f64).prop_map(|(a, b)| ControlInput::new(a, b))
    }

    proptest! {
        #[test]
        fn pcarnn_superposition(s in arb_body(), u1 in arb_u(), u2 in arb_u(), lam in 0.0..1.0f64) {
            for kind in [ModelKind::PcarnnShared, ModelKind::PcarnnSplit] {
                let m = trained_like(kind);
                let mix = ControlInput::new(
                    lam * u1.delta_dot + (1.0 - lam) * u2.delta_dot,
                    lam * u1.f_x + (1.0 - lam) * u2.f_x,
                );
                let d = m.derivative(&s, &mix);
                let d1 = m.derivative(&s, &u1);
                let d2 = m.derivative(&s, &u2);
                for i in 0..4 {
                    let r = d[i] - (lam * d1[i] + (1.0 - lam) * d2[i]);
                    prop_assert!(r.abs() <= 1e-12 * (1.0 + d[i].abs()), "{r}");
                }
                let (_, g) = m.pcarnn_fg(&s).unwrap();
                prop_assert_eq!(g[3], [1.0, 0.0]);
            }
        }
    }
}
