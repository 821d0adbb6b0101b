use super::params::{add_weight_decay, Parameters};
use crate::error::{shape_err, Result};

/// Adam moments and hyperparameters. The L2 coefficient adds `coef * w` to
/// the gradient of every weight tensor (not biases) before the update.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P, lr: f64, l2: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(t, _)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut g = grads.clone();
        add_weight_decay(&mut g, params, self.l2);
        let gt = g.tensors();
        if gt.len() != self.m.len() || gt.iter().zip(&self.m).any(|((t, _), m)| t.len() != m.len()) {
            return shape_err("gradient shapes do not match optimizer state");
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let pt = params.tensors_mut();
        if pt.len() != gt.len() {
            return shape_err("parameter shapes do not match optimizer state");
        }
        for (((p, (g, _)), m), v) in pt.into_iter().zip(gt).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One Adam update of `params` with `grads`.
pub fn adam_step<P: Parameters>(state: &mut AdamState, params: &mut P, grads: &P) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dense::{Activation, DenseParams};
    use crate::nn::tensor::Tensor2;

    fn layer() -> DenseParams {
        DenseParams::new(
            Tensor2::new(2, 2, vec![0.5, -0.5, 1.0, 2.0]).unwrap(),
            vec![0.1, -0.1],
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = layer();
        let before = p.clone();
        let mut st = AdamState::new(&p, 1e-2, 0.0);
        adam_step(&mut st, &mut p, &before.zeros_like()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = layer();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.weight.data_mut().copy_from_slice(&[3.0, -0.2, 1e-3, -50.0]);
        g.bias.copy_from_slice(&[0.7, -0.7]);
        let lr = 1e-3;
        let mut st = AdamState::new(&p, lr, 0.0);
        adam_step(&mut st, &mut p, &g).unwrap();
        for ((a, b), gi) in p.flatten().iter().zip(before.flatten()).zip(g.flatten()) {
            let moved = a - b;
            assert!((moved + lr * gi.signum()).abs() < 1e-7 * lr.max(1.0), "{moved} vs {gi}");
        }
    }

    #[test]
    fn constant_gradient_moves_opposite_sign() {
        let mut p = layer();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.weight.data_mut().copy_from_slice(&[1.0, -1.0, 0.5, -0.25]);
        g.bias.copy_from_slice(&[2.0, -3.0]);
        let mut st = AdamState::new(&p, 1e-2, 0.0);
        for _ in 0..100 {
            adam_step(&mut st, &mut p, &g).unwrap();
        }
        for ((a, b), gi) in p.flatten().iter().zip(before.flatten()).zip(g.flatten()) {
            assert_eq!((a - b).signum(), -gi.signum());
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = layer();
        let mut st = AdamState::new(&p, 1e-2, 0.0);
        let other = DenseParams::new(Tensor2::zeros(1, 2), vec![0.0], Activation::Identity).unwrap();
        let mut q = other.clone();
        assert!(adam_step(&mut st, &mut q, &other).is_err());
        assert!(adam_step(&mut st, &mut p, &layer()).is_ok());
    }
}
