use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// SiLU, `x * sigmoid(x)`. Smooth everywhere, so finite differences agree
/// with the analytic derivative at any point.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Affine layer `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weights = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }
}

/// Stack of affine layers with SiLU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Pre-activations of every layer for one input, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map_or(&self.input, Vec::as_slice)
    }
}

impl Mlp {
    /// Layer widths `dims[0] -> dims[1] -> ... -> dims[last]`.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Layer::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).output().to_vec()
    }

    pub fn trace(&self, x: &[f64]) -> Trace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.forward(&act, &mut z);
            if i < last {
                act = z.iter().map(|&v| silu(v)).collect();
            }
            pre.push(z);
        }
        Trace {
            input: x.to_vec(),
            pre,
        }
    }

    /// Accumulate parameter gradients for `d loss / d output = upstream` into
    /// `grads` (same shape as `self`) and return `d loss / d input`.
    pub fn backward(&self, trace: &Trace, upstream: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let input: Vec<f64> = if i == 0 {
                trace.input.clone()
            } else {
                trace.pre[i - 1].iter().map(|&v| silu(v)).collect()
            };
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(&input).for_each(|(w, x)| *w += d * x);
            }
            let mut next = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                next.iter_mut().zip(row).for_each(|(n, w)| *n += d * w);
            }
            if i > 0 {
                next.iter_mut()
                    .zip(&trace.pre[i - 1])
                    .for_each(|(n, &z)| *n *= silu_grad(z));
            }
            delta = next;
        }
        delta
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }
}
