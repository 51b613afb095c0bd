//! Dense feed-forward network: ReLU between layers, linear output, with
//! explicit backpropagation.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::seed::Rng;
use crate::{Error, Matrix, Result};

/// Elementwise `p <- p - lr * (g + weight_decay * p)`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + weight_decay * *p);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weight: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weight: net.layers.iter().map(|l| Matrix::zeros(l.out_dim(), l.in_dim())).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weight.iter_mut().for_each(|w| w.as_mut_slice().fill(0.0));
        self.bias.iter_mut().for_each(|b| b.fill(0.0));
    }

    /// Flat views of every gradient tensor, in [`Mlp::tensors_mut`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weight.len());
        for (w, b) in self.weight.iter().zip(&self.bias) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }
}

impl Mlp {
    /// Random initialization: He-scaled Gaussian weights for layers feeding a
    /// ReLU, `1/fan_in` variance for the output layer, zero biases.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if l == last { 1.0 } else { 2.0 };
                let std = (gain / fan_in.max(1) as f64).sqrt();
                let weight = Matrix::from_fn(fan_out, fan_in, |_, _| std * rng.sample::<f64, _>(StandardNormal));
                Dense { weight, bias: vec![0.0; fan_out] }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Dense { weight: Matrix::zeros(w[1], w[0]), bias: vec![0.0; w[1]] })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::WidthMismatch {
                    expected: format!("layer {} input width {}", l + 1, pair[0].out_dim()),
                    actual: pair[1].in_dim().to_string(),
                });
            }
        }
        for (l, d) in layers.iter().enumerate() {
            if d.bias.len() != d.out_dim() {
                return Err(Error::WidthMismatch {
                    expected: format!("layer {l} bias length {}", d.out_dim()),
                    actual: d.bias.len().to_string(),
                });
            }
            if !d.weight.is_finite() || d.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFiniteValue("network parameters"));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Dense::out_dim)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if l < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &[f64], scratch: &mut Scratch) -> Vec<f64> {
        scratch.inputs.clear();
        scratch.pre.clear();
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            scratch.inputs.push(h);
            h = if l < last { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            scratch.pre.push(z);
        }
        h
    }

    /// Accumulate `scale * dL/dparams` into `grads` given `dout = dL/doutput`
    /// for the forward pass recorded in `scratch`; returns `dL/dinput` (unscaled).
    pub fn backward(&self, scratch: &Scratch, dout: &[f64], grads: &mut MlpGrads, scale: f64) -> Vec<f64> {
        let mut delta = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l < self.layers.len() - 1 {
                delta.iter_mut().zip(&scratch.pre[l]).for_each(|(d, z)| {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            let input = &scratch.inputs[l];
            let gw = &mut grads.weight[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let sd = scale * d;
                gw.row_mut(o).iter_mut().zip(input).for_each(|(g, x)| *g += sd * x);
                grads.bias[l][o] += sd;
            }
            let w = &self.layers[l].weight;
            let mut dinput = vec![0.0; w.cols()];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    dinput.iter_mut().zip(w.row(o)).for_each(|(di, wv)| *di += d * wv);
                }
            }
            delta = dinput;
        }
        delta
    }

    /// Mutable flat views of every parameter tensor: `w0, b0, w1, b1, ...`.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64, weight_decay: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            sgd_step(p, g, lr, weight_decay);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        sgd_step(&mut p, &[0.5], 0.1, 0.0);
        assert!((p[0] - 0.95).abs() < 1e-15);
        let mut p = [1.0, -2.0, 3.0];
        sgd_step(&mut p, &[0.0; 3], 0.1, 0.0);
        assert_eq!(p, [1.0, -2.0, 3.0]);
        let mut p = [2.0];
        sgd_step(&mut p, &[0.0], 0.1, 1.0);
        assert!((p[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn shapes() {
        let net = Mlp::new(&[5, 7, 3], &mut seed::rng(0));
        assert_eq!(net.widths(), vec![5, 7, 3]);
        assert_eq!(net.forward(&[0.0; 5]).len(), 3);
        let bad = Mlp::from_layers(vec![
            Dense { weight: Matrix::zeros(3, 2), bias: vec![0.0; 3] },
            Dense { weight: Matrix::zeros(1, 4), bias: vec![0.0] },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn cached_forward_matches_plain() {
        let net = Mlp::new(&[4, 6, 6, 2], &mut seed::rng(3));
        let x = [0.3, -1.2, 2.0, 0.5];
        let mut s = Scratch::default();
        assert_eq!(net.forward(&x), net.forward_cached(&x, &mut s));
    }
}
