use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::dense::{Activation, Dropout, Mlp, MlpCache};
use super::params::Parameters;
use super::tensor::Tensor2;
use crate::error::{shape_err, Result};

/// Layer counts and width for a dueling Q network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuelingArch {
    /// Hidden layers in the shared encoder.
    pub representation_layers: usize,
    /// Layers in each of the value and advantage streams, including the output layer.
    pub dueling_layers: usize,
    pub width: usize,
}

/// Shared encoder feeding a scalar value stream and a per-action advantage
/// stream; Q is `V + A - mean(A)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuelingParams {
    pub encoder: Mlp,
    pub value_stream: Mlp,
    pub advantage_stream: Mlp,
}

pub struct DuelingCache {
    encoder: MlpCache,
    value: MlpCache,
    advantage: MlpCache,
}

impl DuelingParams {
    pub fn new(encoder: Mlp, value_stream: Mlp, advantage_stream: Mlp) -> Result<Self> {
        let p = Self {
            encoder,
            value_stream,
            advantage_stream,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn init(input_dim: usize, n_actions: usize, arch: DuelingArch, rng: &mut dyn RngCore) -> Self {
        let w = arch.width;
        let encoder = Mlp::with_hidden(
            input_dim,
            arch.representation_layers.saturating_sub(1),
            w,
            w,
            Activation::Relu,
            rng,
        );
        let stream_hidden = arch.dueling_layers.saturating_sub(1);
        let value_stream = Mlp::with_hidden(w, stream_hidden, w, 1, Activation::Identity, rng);
        let advantage_stream = Mlp::with_hidden(w, stream_hidden, w, n_actions, Activation::Identity, rng);
        Self {
            encoder,
            value_stream,
            advantage_stream,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.value_stream.output_dim() != 1 {
            return shape_err("value stream must end in a scalar");
        }
        let f = self.encoder.output_dim();
        if self.value_stream.input_dim() != f || self.advantage_stream.input_dim() != f {
            return shape_err("streams must consume the encoder output");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.advantage_stream.output_dim()
    }

    /// `(V(f(s)), A(f(s), ·))` before the mean subtraction.
    pub fn streams(&self, s: &[f64]) -> Result<(f64, Vec<f64>)> {
        let f = self.encoder.forward(s)?;
        let v = self.value_stream.forward(&f)?[0];
        let a = self.advantage_stream.forward(&f)?;
        Ok((v, a))
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        let (v, a) = self.streams(s)?;
        Ok(combine(v, &a))
    }

    pub fn forward_batch(&self, x: &Tensor2) -> Result<Tensor2> {
        let f = self.encoder.forward_batch(x)?;
        let v = self.value_stream.forward_batch(&f)?;
        let mut a = self.advantage_stream.forward_batch(&f)?;
        for b in 0..a.rows() {
            let q = combine(v.get(b, 0), a.row(b));
            a.row_mut(b).copy_from_slice(&q);
        }
        Ok(a)
    }

    /// Forward with cached intermediates; dropout touches encoder outputs.
    pub fn forward_cached(&self, x: &Tensor2, mut dropout: Option<&mut Dropout<'_>>) -> Result<(Tensor2, DuelingCache)> {
        let (f, enc) = self.encoder.forward_cached(x, dropout.as_deref_mut(), true)?;
        let (v, vc) = self.value_stream.forward_cached(&f, dropout.as_deref_mut(), false)?;
        let (mut a, ac) = self.advantage_stream.forward_cached(&f, dropout, false)?;
        for b in 0..a.rows() {
            let q = combine(v.get(b, 0), a.row(b));
            a.row_mut(b).copy_from_slice(&q);
        }
        Ok((
            a,
            DuelingCache {
                encoder: enc,
                value: vc,
                advantage: ac,
            },
        ))
    }

    pub fn backward(&self, cache: &DuelingCache, dq: &Tensor2) -> Result<DuelingParams> {
        let n = self.n_actions();
        if dq.cols() != n {
            return shape_err("q gradient width does not match action count");
        }
        let mut dv = Tensor2::zeros(dq.rows(), 1);
        let mut da = Tensor2::zeros(dq.rows(), n);
        for b in 0..dq.rows() {
            let row = dq.row(b);
            let total: f64 = row.iter().sum();
            let mean = total / n as f64;
            dv.set(b, 0, total);
            for (d, g) in da.row_mut(b).iter_mut().zip(row) {
                *d = g - mean;
            }
        }
        let (gv, dfv) = self.value_stream.backward(&cache.value, &dv)?;
        let (ga, mut df) = self.advantage_stream.backward(&cache.advantage, &da)?;
        for (x, y) in df.data_mut().iter_mut().zip(dfv.data()) {
            *x += y;
        }
        let (ge, _) = self.encoder.backward(&cache.encoder, &df)?;
        Ok(DuelingParams {
            encoder: ge,
            value_stream: gv,
            advantage_stream: ga,
        })
    }
}

fn combine(v: f64, a: &[f64]) -> Vec<f64> {
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    a.iter().map(|ai| v + ai - mean).collect()
}

impl Parameters for DuelingParams {
    fn tensors(&self) -> Vec<(&[f64], bool)> {
        let mut t = self.encoder.tensors();
        t.extend(self.value_stream.tensors());
        t.extend(self.advantage_stream.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.value_stream.tensors_mut());
        t.extend(self.advantage_stream.tensors_mut());
        t
    }
}

/// Q-values of every action for state `s`.
pub fn dueling_forward(p: &DuelingParams, s: &[f64]) -> Result<Vec<f64>> {
    p.forward(s)
}
