//! Small fully connected networks with LeakyReLU hidden activations, exact
//! reverse-mode gradients and an Adam optimizer.
//!
//! Batches are row-major in the sense of "one sample per row": inputs are
//! `B x in` matrices and outputs `B x out`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint parameter count {got} does not match widths ({expected})")]
    ParamCount { expected: usize, got: usize },
}

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

/// One affine layer: `y = x W + b`, with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(fan_in, fan_out),
            bias: DVector::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Dense>,
    negative_slope: f64,
}

/// Per-layer activations kept from a forward pass; `acts[0]` is the input
/// and `acts[L]` the network output.
#[derive(Clone, Debug)]
pub struct Trace {
    acts: Vec<DMatrix<f64>>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.acts.last().expect("trace holds at least the input")
    }
}

/// Gradients shaped like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Dense>,
}

impl MlpGrad {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
    out
}

impl Mlp {
    /// Network with the given layer widths (input first, output last) and
    /// Glorot-uniform weights; biases start at zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(widths);
        for layer in &mut net.layers {
            let (fan_in, fan_out) = layer.weight.shape();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.weight.iter_mut().for_each(|w| *w = rng.random_range(-a..=a));
        }
        net
    }

    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self {
            widths: widths.to_vec(),
            layers,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
        }
    }

    /// `in -> hidden... -> out`.
    pub fn with_hidden<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(&widths, rng)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn negative_slope(&self) -> f64 {
        self.negative_slope
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(NnError::ParamCount {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&params[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&params[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<(), NnError> {
        if cols != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    fn affine(&self, layer: &Dense, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * &layer.weight;
        for (j, b) in layer.bias.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*b);
        }
        z
    }

    fn activate(&self, z: &mut DMatrix<f64>) {
        let s = self.negative_slope;
        z.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= s
            }
        });
    }

    /// Single-sample evaluation.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(input.len())?;
        let x = DMatrix::from_row_slice(1, input.len(), input);
        Ok(self.forward_batch(&x)?.as_slice().to_vec())
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NnError> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = self.affine(&self.layers[0], x);
        if last > 0 {
            self.activate(&mut h);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = self.affine(layer, &h);
            if i < last {
                self.activate(&mut h);
            }
        }
        Ok(h)
    }

    /// Forward pass that keeps the activations needed by [`Mlp::backward`].
    pub fn forward_trace(&self, x: DMatrix<f64>) -> Result<Trace, NnError> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = self.affine(layer, acts.last().unwrap());
            if i < last {
                self.activate(&mut z);
            }
            acts.push(z);
        }
        Ok(Trace { acts })
    }

    /// Gradients of `sum(upstream .* output)` with respect to every parameter
    /// and to the input batch.
    pub fn backward(&self, trace: &Trace, upstream: &DMatrix<f64>) -> (MlpGrad, DMatrix<f64>) {
        let last = self.layers.len() - 1;
        let s = self.negative_slope;
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                // post-activation sign equals pre-activation sign for a positive slope
                g.zip_apply(&trace.acts[l + 1], |gv, a| {
                    if a <= 0.0 {
                        *gv *= s
                    }
                });
            }
            let input = &trace.acts[l];
            grads[l].weight = input.tr_mul(&g);
            grads[l].bias = DVector::from_iterator(g.ncols(), g.column_iter().map(|c| c.sum()));
            g = &g * self.layers[l].weight.transpose();
        }
        (MlpGrad { layers: grads }, g)
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            version: MlpCheckpoint::VERSION,
            widths: self.widths.clone(),
            negative_slope: self.negative_slope,
            params: self.flat_params(),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self, NnError> {
        if ck.version != MlpCheckpoint::VERSION {
            return Err(NnError::Version(ck.version));
        }
        let mut net = Self::zeros(&ck.widths);
        net.negative_slope = ck.negative_slope;
        net.set_flat_params(&ck.params)?;
        Ok(net)
    }
}

/// Serialized network: widths plus parameters flattened layer by layer
/// (weight in column-major `in x out` order, then bias).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub version: u32,
    pub widths: Vec<usize>,
    pub negative_slope: f64,
    pub params: Vec<f64>,
}

impl MlpCheckpoint {
    pub const VERSION: u32 = 1;
}

/// Adam state for one network.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Self::with_lr(net, 1e-3)
    }

    pub fn with_lr(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: net.layers.iter().map(Dense::zeros_like).collect(),
            v: net.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut Mlp, grad: &MlpGrad) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            update(
                layer.weight.as_mut_slice(),
                grad.layers[l].weight.as_slice(),
                self.m[l].weight.as_mut_slice(),
                self.v[l].weight.as_mut_slice(),
            );
            update(
                layer.bias.as_mut_slice(),
                grad.layers[l].bias.as_slice(),
                self.m[l].bias.as_mut_slice(),
                self.v[l].bias.as_mut_slice(),
            );
        }
    }
}
