use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::tensor::{axpy, dot, Tensor2};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One fully connected layer, `activation(W x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseParams {
    pub fn new(weight: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return shape_err(format!(
                "bias length {} does not match {} weight rows",
                bias.len(),
                weight.rows()
            ));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Uniform Glorot initialization (He-scaled for ReLU), zero bias.
    pub fn init(input: usize, output: usize, activation: Activation, rng: &mut dyn RngCore) -> Self {
        let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
        let limit = (3.0 * gain * 2.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor2::new(output, input, data).expect("sized by construction"),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return shape_err(format!(
                "layer expects input of length {}, got {}",
                self.input_dim(),
                x.len()
            ));
        }
        Ok((0..self.output_dim())
            .map(|j| self.activation.apply(dot(self.weight.row(j), x) + self.bias[j]))
            .collect())
    }

    pub fn forward_batch(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut z = x.matmul_transposed(&self.weight)?;
        for b in 0..z.rows() {
            for (v, bias) in z.row_mut(b).iter_mut().zip(&self.bias) {
                *v = self.activation.apply(*v + bias);
            }
        }
        Ok(z)
    }
}

impl Parameters for DenseParams {
    fn tensors(&self) -> Vec<(&[f64], bool)> {
        vec![(self.weight.data(), true), (&self.bias, false)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }
}

/// Inverted-dropout settings for a training-mode forward pass.
pub struct Dropout<'a> {
    pub keep: f64,
    pub rng: &'a mut dyn RngCore,
}

/// A stack of dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseParams>,
}

/// Intermediates of [`Mlp::forward_cached`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Tensor2>,
    outputs: Vec<Tensor2>,
    /// Scaled keep masks (0 or 1/keep) applied to each layer's output.
    masks: Vec<Option<Tensor2>>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseParams>) -> Result<Self> {
        if layers.is_empty() {
            return shape_err("an MLP needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return shape_err(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                ));
            }
        }
        Ok(Self { layers })
    }

    /// `hidden` ReLU layers of `width` followed by a linear output layer.
    pub fn with_hidden(
        input: usize,
        hidden: usize,
        width: usize,
        output: usize,
        output_activation: Activation,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut prev = input;
        for _ in 0..hidden {
            layers.push(DenseParams::init(prev, width, Activation::Relu, rng));
            prev = width;
        }
        layers.push(DenseParams::init(prev, output, output_activation, rng));
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward_batch(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut cur = self.layers[0].forward_batch(x)?;
        for layer in &self.layers[1..] {
            cur = layer.forward_batch(&cur)?;
        }
        Ok(cur)
    }

    /// Forward pass keeping what [`Mlp::backward`] needs. With `dropout`,
    /// masks are applied to hidden outputs, and also to the final output when
    /// `drop_output` is set.
    pub fn forward_cached(
        &self,
        x: &Tensor2,
        mut dropout: Option<&mut Dropout<'_>>,
        drop_output: bool,
    ) -> Result<(Tensor2, MlpCache)> {
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut cur = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let out = layer.forward_batch(&cur)?;
            let apply = l + 1 < n || drop_output;
            let mask = match dropout.as_deref_mut() {
                Some(d) if apply && d.keep < 1.0 => Some(draw_mask(out.rows(), out.cols(), d)),
                _ => None,
            };
            let mut next = out.clone();
            if let Some(m) = &mask {
                for (v, k) in next.data_mut().iter_mut().zip(m.data()) {
                    *v *= k;
                }
            }
            cache.inputs.push(std::mem::replace(&mut cur, next));
            cache.outputs.push(out);
            cache.masks.push(mask);
        }
        Ok((cur, cache))
    }

    /// Reverse pass: parameter gradients and the gradient with respect to the
    /// batch input, for upstream gradient `grad_out` on the (masked) output.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Tensor2) -> Result<(Mlp, Tensor2)> {
        let n = self.layers.len();
        if cache.outputs.len() != n || !grad_out.same_shape(&cache.outputs[n - 1]) {
            return shape_err("upstream gradient does not match cached forward pass");
        }
        let mut grads = self.zeros_like();
        let mut d = grad_out.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            if let Some(m) = &cache.masks[l] {
                for (g, k) in d.data_mut().iter_mut().zip(m.data()) {
                    *g *= k;
                }
            }
            let out = &cache.outputs[l];
            if layer.activation != Activation::Identity {
                for (g, a) in d.data_mut().iter_mut().zip(out.data()) {
                    *g *= layer.activation.derivative_from_output(*a);
                }
            }
            let gl = &mut grads.layers[l];
            d.accumulate_transposed_product(&cache.inputs[l], &mut gl.weight)?;
            for b in 0..d.rows() {
                axpy(&mut gl.bias, 1.0, d.row(b));
            }
            d = d.matmul(&layer.weight)?;
        }
        Ok((grads, d))
    }
}

fn draw_mask(rows: usize, cols: usize, d: &mut Dropout<'_>) -> Tensor2 {
    let scale = 1.0 / d.keep;
    let data = (0..rows * cols)
        .map(|_| if d.rng.random::<f64>() < d.keep { scale } else { 0.0 })
        .collect();
    Tensor2::new(rows, cols, data).expect("sized by construction")
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<(&[f64], bool)> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// `activation(W x + b)` for a single vector.
pub fn affine_forward(layer: &DenseParams, x: &[f64]) -> Result<Vec<f64>> {
    layer.forward(x)
}
