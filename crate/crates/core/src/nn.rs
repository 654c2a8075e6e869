//! Fully connected networks with Leaky ReLU hidden activations and a linear
//! head, with exact backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// `t` for `t >= 0`, `slope * t` otherwise.
pub fn leaky_relu(t: f64, slope: f64) -> f64 {
    if t >= 0.0 {
        t
    } else {
        slope * t
    }
}

/// Derivative of [`leaky_relu`]; the subgradient at 0 is taken as `slope`.
pub fn leaky_relu_grad(t: f64, slope: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "DenseRepr", try_from = "DenseRepr")]
pub struct Dense {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Row-major serialized form of a layer.
#[derive(Serialize, Deserialize)]
struct DenseRepr {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<Dense> for DenseRepr {
    fn from(d: Dense) -> Self {
        DenseRepr {
            weights: d.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: d.bias.to_vec(),
        }
    }
}

impl TryFrom<DenseRepr> for Dense {
    type Error = String;

    fn try_from(r: DenseRepr) -> Result<Self, String> {
        let out = r.weights.len();
        let inp = r.weights.first().map_or(0, Vec::len);
        if r.bias.len() != out || r.weights.iter().any(|row| row.len() != inp) {
            return Err("ragged layer".into());
        }
        let flat: Vec<f64> = r.weights.into_iter().flatten().collect();
        Ok(Dense {
            weights: Array2::from_shape_vec((out, inp), flat).map_err(|e| e.to_string())?,
            bias: Array1::from(r.bias),
        })
    }
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub leaky_slope: f64,
}

/// Activations kept from a forward pass for backpropagation.
pub struct ForwardCache {
    /// Input of each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

/// Same shapes as the network: one weight matrix and bias per layer.
pub type Gradients = Vec<Dense>;

impl Mlp {
    pub fn zeros(dims: &[usize], leaky_slope: f64) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            leaky_slope,
        }
    }

    /// He-normal weights, zero biases.
    pub fn random<R: Rng>(dims: &[usize], leaky_slope: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(dims, leaky_slope);
        for layer in &mut net.layers {
            let std = (2.0 / layer.inputs() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            layer.weights.mapv_inplace(|_| normal.sample(rng));
        }
        net
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs()];
        d.extend(self.layers.iter().map(Dense::outputs));
        d
    }

    pub fn check_dims(&self, expected: &[usize]) -> Result<()> {
        if self.dims() != expected {
            return Err(Error::Invariant(format!(
                "network dims {:?}, expected {expected:?}",
                self.dims()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    /// Forward pass over a `batch × inputs` matrix.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weights.t()) + &layer.bias;
            if i < last {
                let s = self.leaky_slope;
                h.mapv_inplace(|t| leaky_relu(t, s));
            }
        }
        h
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward(x).into_raw_vec_and_offset().0
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weights.t()) + &layer.bias;
            inputs.push(h);
            h = if i < last {
                let s = self.leaky_slope;
                z.mapv(|t| leaky_relu(t, s))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        ForwardCache { inputs, pre }
    }

    /// Gradients of `Σ_batch grad_out · output` with respect to every
    /// parameter, i.e. the chain rule with `grad_out = ∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>) -> Gradients {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let gw = delta.t().dot(&cache.inputs[i]);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&layer.weights);
                let s = self.leaky_slope;
                back.zip_mut_with(&cache.pre[i - 1], |d, &z| *d *= leaky_relu_grad(z, s));
                delta = back;
            }
            grads.push(Dense {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        grads
    }

    /// `self += scale * grads`.
    pub fn add_scaled(&mut self, grads: &[Dense], scale: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.weights.scaled_add(scale, &g.weights);
            layer.bias.scaled_add(scale, &g.bias);
        }
    }

    /// Parameters flattened layer by layer: row-major weights, then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend(l.weights.iter());
            v.extend(l.bias.iter());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
    }
}

/// Flattens gradients in the same order as [`Mlp::to_flat`].
pub fn flatten_gradients(grads: &[Dense]) -> Vec<f64> {
    let mut v = Vec::new();
    for g in grads {
        v.extend(g.weights.iter());
        v.extend(g.bias.iter());
    }
    v
}
