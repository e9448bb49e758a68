//! Dense feedforward network with SiLU hidden activations, a hand-written
//! backward pass and power-iteration spectral normalization.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub spectral_norm: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, spectral_norm: bool) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            spectral_norm,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("{self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer in declaration order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// One affine layer; `weight` is `rows × cols` row-major (`rows` = fan-out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Left singular vector estimate carried across power iterations.
    pub power_u: Option<Vec<f64>>,
}

impl Linear {
    pub fn zeros(cols: usize, rows: usize) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
            power_u: None,
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.bias[r];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }

    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                self.weight[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn matvec_t(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, ur) in u.iter().enumerate() {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * ur;
            }
        }
        out
    }

    /// Power-iteration estimate of the largest singular value. Updates the
    /// stored left vector.
    pub fn estimate_sigma_max(&mut self, iterations: usize) -> f64 {
        let mut u = match self.power_u.take() {
            Some(u) if u.len() == self.rows => u,
            // Deterministic start vector; avoids an RNG dependency at load time.
            _ => (0..self.rows)
                .map(|i| 1.0 + 0.1 * ((i as f64) * 0.618_033_988_7).fract())
                .collect(),
        };
        normalize(&mut u);
        let mut sigma = 0.0;
        for _ in 0..iterations.max(1) {
            let mut v = self.matvec_t(&u);
            if normalize(&mut v) == 0.0 {
                self.power_u = Some(u);
                return 0.0;
            }
            let mut wv = self.matvec(&v);
            sigma = normalize(&mut wv);
            if sigma == 0.0 {
                self.power_u = Some(u);
                return 0.0;
            }
            u = wv;
        }
        self.power_u = Some(u);
        sigma
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

pub fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Per-layer gradients, same layout as [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weight: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            g.iter_mut().for_each(|x| *x *= k);
        }
    }
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Linear::zeros(i, o))
            .collect();
        Ok(Self { spec, layers })
    }

    /// He-style normal initialization on all layers, zero biases.
    pub fn random<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self, ModelError> {
        let mut net = Self::zeros(spec)?;
        for layer in &mut net.layers {
            let std = (2.0 / layer.cols as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            layer.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        Ok(net)
    }

    /// Re-draws the output layer with the given standard deviation
    /// (0 zeroes it, bias included).
    pub fn init_output_layer<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.bias.iter_mut().for_each(|b| *b = 0.0);
        if std == 0.0 {
            last.weight.iter_mut().for_each(|w| *w = 0.0);
        } else {
            let normal = Normal::new(0.0, std).expect("positive std");
            last.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
    }

    /// Zeroes the output rows in `rows` (weights and biases).
    pub fn zero_output_rows(&mut self, rows: std::ops::Range<usize>) {
        let last = self.layers.last_mut().expect("at least one layer");
        for r in rows {
            last.bias[r] = 0.0;
            last.weight[r * last.cols..(r + 1) * last.cols]
                .iter_mut()
                .for_each(|w| *w = 0.0);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Checks that stored layer shapes agree with the spec.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.spec.validate()?;
        let shapes = self.spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(ModelError::ShapeMismatch {
                expected: shapes.len(),
                got: self.layers.len(),
            });
        }
        for ((i, o), l) in shapes.iter().zip(&self.layers) {
            if l.cols != *i || l.rows != *o || l.weight.len() != i * o || l.bias.len() != *o {
                return Err(ModelError::ShapeMismatch {
                    expected: i * o,
                    got: l.weight.len(),
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, ModelError> {
        if input.len() != self.spec.input_dim {
            return Err(ModelError::ShapeMismatch {
                expected: self.spec.input_dim,
                got: input.len(),
            });
        }
        let mut x = input.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.apply(&x, &mut z);
            if k < last {
                z.iter_mut().for_each(|v| *v = silu(*v));
            }
            std::mem::swap(&mut x, &mut z);
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), ModelError> {
        if input.len() != self.spec.input_dim {
            return Err(ModelError::ShapeMismatch {
                expected: self.spec.input_dim,
                got: input.len(),
            });
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.rows);
            layer.apply(&x, &mut z);
            cache.inputs.push(x);
            x = if k < last {
                z.iter().map(|&v| silu(v)).collect()
            } else {
                z.clone()
            };
            cache.pre.push(z);
        }
        Ok((x, cache))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut MlpGrads) {
        let last = self.layers.len() - 1;
        let mut delta = grad_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k < last {
                for (d, z) in delta.iter_mut().zip(&cache.pre[k]) {
                    *d *= silu_grad(*z);
                }
            }
            let x = &cache.inputs[k];
            let gw = &mut grads.weight[k];
            for r in 0..layer.rows {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                grads.bias[k][r] += dr;
                for (g, xi) in gw[r * layer.cols..(r + 1) * layer.cols].iter_mut().zip(x) {
                    *g += dr * xi;
                }
            }
            if k > 0 {
                delta = layer.matvec_t(&delta);
            }
        }
    }

    /// Divides every layer whose power-iteration estimate exceeds 1 by that
    /// estimate. Applies only when the spec enables spectral normalization.
    pub fn spectral_normalize(&mut self, iterations: usize) {
        if !self.spec.spectral_norm {
            return;
        }
        for layer in &mut self.layers {
            let sigma = layer.estimate_sigma_max(iterations);
            if sigma > 1.0 {
                layer.weight.iter_mut().for_each(|w| *w /= sigma);
            }
        }
    }

    /// Functional form of [`Self::spectral_normalize`].
    pub fn spectrally_normalized(&self, iterations: usize) -> Self {
        let mut out = self.clone();
        out.spectral_normalize(iterations);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.spec.parameter_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(MlpSpec::new(3, &[5, 4], 2, false)).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let mut net = Mlp::zeros(MlpSpec::new(3, &[], 3, false)).unwrap();
        for i in 0..3 {
            net.layers[0].weight[i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[0.3, -1.0, 2.5]).unwrap(), vec![0.3, -1.0, 2.5]);
    }

    #[test]
    fn shape_mismatch() {
        let net = Mlp::zeros(MlpSpec::new(3, &[4], 2, false)).unwrap();
        assert_eq!(
            net.forward(&[1.0]),
            Err(ModelError::ShapeMismatch {
                expected: 3,
                got: 1
            })
        );
        assert!(Mlp::zeros(MlpSpec::new(3, &[0], 2, false)).is_err());
    }

    #[test]
    fn two_layer_matches_straight_line_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let net = Mlp::random(MlpSpec::new(2, &[3], 2, false), &mut rng).unwrap();
        let x = [1.0, -1.0];
        let w1 = &net.layers[0].weight;
        let b1 = &net.layers[0].bias;
        let w2 = &net.layers[1].weight;
        let b2 = &net.layers[1].bias;
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let h0 = w1[0] * x[0] + w1[1] * x[1] + b1[0];
        let h1 = w1[2] * x[0] + w1[3] * x[1] + b1[1];
        let h2 = w1[4] * x[0] + w1[5] * x[1] + b1[2];
        let (a0, a1, a2) = (h0 * sig(h0), h1 * sig(h1), h2 * sig(h2));
        let y0 = w2[0] * a0 + w2[1] * a1 + w2[2] * a2 + b2[0];
        let y1 = w2[3] * a0 + w2[4] * a1 + w2[5] * a2 + b2[1];
        let out = net.forward(&x).unwrap();
        assert!((out[0] - y0).abs() < 1e-12 && (out[1] - y1).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::random(MlpSpec::new(4, &[6, 5], 3, false), &mut rng).unwrap();
        let x = [0.4, -0.7, 1.1, 0.2];
        let w = [0.3, -1.2, 0.8];
        let loss = |n: &Mlp| -> f64 {
            n.forward(&x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward_cached(&x).unwrap();
        let mut grads = MlpGrads::zeros_like(&net);
        net.backward(&cache, &w, &mut grads);
        let h = 1e-6;
        for k in 0..net.layers.len() {
            for idx in 0..net.layers[k].weight.len() {
                let mut p = net.clone();
                p.layers[k].weight[idx] += h;
                let mut m = net.clone();
                m.layers[k].weight[idx] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let g = grads.weight[k][idx];
                assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()), "{k} {idx}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn spectral_norm_examples() {
        let mut net = Mlp::zeros(MlpSpec::new(4, &[], 4, true)).unwrap();
        for i in 0..4 {
            net.layers[0].weight[i * 4 + i] = 2.0;
        }
        net.spectral_normalize(50);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((net.layers[0].weight[i * 4 + j] - expect).abs() < 1e-12);
            }
        }
        let mut small = Mlp::zeros(MlpSpec::new(2, &[], 2, true)).unwrap();
        small.layers[0].weight = vec![0.5, 0.0, 0.0, 0.25];
        let before = small.clone();
        small.spectral_normalize(50);
        assert_eq!(small.layers[0].weight, before.layers[0].weight);
    }

    #[test]
    fn spectral_norm_disabled_is_noop() {
        let mut net = Mlp::zeros(MlpSpec::new(2, &[], 2, false)).unwrap();
        net.layers[0].weight = vec![3.0, 0.0, 0.0, 3.0];
        net.spectral_normalize(10);
        assert_eq!(net.layers[0].weight, vec![3.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn silu_gradient() {
        for &z in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(z + h) - silu(z - h)) / (2.0 * h);
            assert!((fd - silu_grad(z)).abs() < 1e-8);
        }
    }
}
