//! Dense feed-forward networks with exact manual backpropagation.
//!
//! Weights are stored `[out × in]`, activations row-major `[batch × dim]`, so
//! a layer computes `A_k = act(A_{k-1} · W_kᵀ + b_k)`. Batched passes go
//! through ndarray's GEMM; single-instance calls are batches of one.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Per-layer activations recorded by a forward pass.
///
/// `activations[0]` is the input batch and `activations[k]` the output of
/// layer `k`. The layer dimensions are kept so a tape from another network
/// is rejected by [`DenseNet::backward_batch`].
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Array2<f64>>,
    dims: Vec<(usize, usize)>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape always holds the input")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

/// Gradients congruent with a [`DenseNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        ParamGrads {
            weights: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    /// Flattened in the same order as [`DenseNet::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl DenseNet {
    /// Build a network from explicit layers; consecutive dimensions must chain.
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::invalid(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::invalid(format!("layer {k}: bias length mismatch")));
            }
            ensure_finite(l.weight.as_slice().unwrap_or(&[]), "weights")?;
            ensure_finite(l.bias.as_slice().unwrap_or(&[]), "biases")?;
        }
        Ok(DenseNet { layers })
    }

    /// Multilayer perceptron with `hidden` activations between layers and
    /// `output` on the last one. Glorot-uniform weights, zero biases.
    pub fn mlp<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
                let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-r..=r));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if k + 1 == n { output } else { hidden },
                }
            })
            .collect();
        DenseNet::new(layers)
    }

    /// Same topology as [`DenseNet::mlp`] with every parameter zero.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| Dense {
                weight: Array2::zeros((sizes[k + 1], sizes[k])),
                bias: Array1::zeros(sizes[k + 1]),
                activation: if k + 1 == n { output } else { hidden },
            })
            .collect();
        DenseNet::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        Ok(())
    }

    fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect()
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let batch = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let tape = self.forward_batch(batch)?;
        let out = tape.output().row(0).to_vec();
        Ok((out, tape))
    }

    /// Forward pass for a `[batch × in]` matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Tape> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.layers {
            let prev = activations.last().unwrap();
            let mut z = prev.dot(&layer.weight.t());
            z += &layer.bias;
            let act = layer.activation;
            z.mapv_inplace(|v| act.apply(v));
            activations.push(z);
        }
        Ok(Tape {
            activations,
            dims: self.dims(),
        })
    }

    /// Output only; skips keeping the intermediate activations around.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch(x)?.activations.pop().unwrap())
    }

    /// Backward pass for a single-instance tape.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64]) -> Result<(ParamGrads, Vec<f64>)> {
        let g = ArrayView2::from_shape((1, grad_out.len()), grad_out)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let (grads, gin) = self.backward_batch(tape, g)?;
        Ok((grads, gin.row(0).to_vec()))
    }

    /// Exact gradients of `Σ_rows ⟨grad_out, output⟩` with respect to every
    /// parameter (summed over the batch) and to each input row.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        grad_out: ArrayView2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>)> {
        if tape.dims != self.dims() {
            return Err(Error::invalid("tape was not produced by this network"));
        }
        let out = tape.output();
        if grad_out.dim() != out.dim() {
            return Err(Error::DimensionMismatch {
                context: "gradient of network output",
                expected: out.len(),
                actual: grad_out.len(),
            });
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = grad_out.to_owned();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let y = &tape.activations[k + 1];
            let act = layer.activation;
            delta.zip_mut_with(y, |d, &yv| *d *= act.derivative_from_output(yv));
            let input = &tape.activations[k];
            weights.push(delta.t().dot(input));
            biases.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&layer.weight);
        }
        weights.reverse();
        biases.reverse();
        Ok((ParamGrads { weights, biases }, delta))
    }

    /// Apply one Adam step that *descends* along `grads`.
    pub fn adam_step(&mut self, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
        if grads.weights.len() != self.layers.len() || state.m.len() != 2 * self.layers.len() {
            return Err(Error::invalid("gradient/optimizer state not congruent with network"));
        }
        if !grads.is_finite() {
            return Err(Error::numeric("adam step rejected: non-finite gradient"));
        }
        state.step += 1;
        let t = state.step;
        let hp = state.config;
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let (m_w, rest) = state.m[2 * k..].split_at_mut(1);
            let (v_w, v_rest) = state.v[2 * k..].split_at_mut(1);
            adam_update(
                layer.weight.as_slice_mut().expect("standard layout"),
                grads.weights[k].as_slice().expect("standard layout"),
                &mut m_w[0],
                &mut v_w[0],
                t,
                &hp,
            );
            adam_update(
                layer.bias.as_slice_mut().expect("standard layout"),
                grads.biases[k].as_slice().expect("standard layout"),
                &mut rest[0],
                &mut v_rest[0],
                t,
                &hp,
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one network: two tensors (weight, bias) per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = net
            .layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect();
        AdamState {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Bias-corrected Adam update of one tensor at step `t` (1-based), descending.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hp: &AdamConfig,
) {
    debug_assert!(params.len() == grads.len() && m.len() == grads.len() && v.len() == grads.len());
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Central finite differences `(f(θ+ε e_i) - f(θ-ε e_i)) / 2ε` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut theta = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = f(&theta);
        theta[i] = orig - eps;
        let minus = f(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "objective not finite around coordinate {i}"
            )));
        }
        grads.push((plus - minus) / (2.0 * eps));
    }
    Ok(grads)
}

/// Normwise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
