use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::dense::sigmoid;
use super::params::Parameters;
use super::tensor::{axpy, dot, Tensor2};
use crate::error::{shape_err, Error, Result};

/// Single-layer LSTM cell. Every gate matrix is `hidden × (input + hidden)`
/// and acts on the concatenation `[x; h_prev]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: Tensor2,
    pub w_forget: Tensor2,
    pub w_output: Tensor2,
    pub w_cell: Tensor2,
    pub b_input: Vec<f64>,
    pub b_forget: Vec<f64>,
    pub b_output: Vec<f64>,
    pub b_cell: Vec<f64>,
}

/// Dropout masks for one training sequence. Entries are 0 or 1/keep.
#[derive(Clone, Debug, Default)]
pub struct LstmMasks {
    /// One mask per step over the input vector.
    pub input: Option<Vec<Vec<f64>>>,
    /// A single mask over `h_prev`, shared by every step.
    pub recurrent: Option<Vec<f64>>,
}

struct StepCache {
    z: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Intermediates of [`LstmParams::unroll_cached`].
pub struct LstmCache {
    steps: Vec<StepCache>,
    masks: LstmMasks,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let cols = input_dim + hidden_dim;
        Self {
            input_dim,
            hidden_dim,
            w_input: Tensor2::zeros(hidden_dim, cols),
            w_forget: Tensor2::zeros(hidden_dim, cols),
            w_output: Tensor2::zeros(hidden_dim, cols),
            w_cell: Tensor2::zeros(hidden_dim, cols),
            b_input: vec![0.0; hidden_dim],
            b_forget: vec![0.0; hidden_dim],
            b_output: vec![0.0; hidden_dim],
            b_cell: vec![0.0; hidden_dim],
        }
    }

    /// Uniform `±1/sqrt(hidden)` weights, forget bias 1.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut dyn RngCore) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        let limit = 1.0 / (hidden_dim as f64).sqrt();
        for t in [&mut p.w_input, &mut p.w_forget, &mut p.w_output, &mut p.w_cell] {
            for v in t.data_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        p.b_forget.fill(1.0);
        p
    }

    pub fn validate(&self) -> Result<()> {
        let cols = self.input_dim + self.hidden_dim;
        for w in [&self.w_input, &self.w_forget, &self.w_output, &self.w_cell] {
            if w.rows() != self.hidden_dim || w.cols() != cols {
                return shape_err(format!(
                    "gate matrix is {}x{}, expected {}x{}",
                    w.rows(),
                    w.cols(),
                    self.hidden_dim,
                    cols
                ));
            }
        }
        for b in [&self.b_input, &self.b_forget, &self.b_output, &self.b_cell] {
            if b.len() != self.hidden_dim {
                return shape_err("gate bias length does not match hidden size");
            }
        }
        Ok(())
    }

    fn check_step(&self, x: &[f64], h: &[f64], c: &[f64]) -> Result<()> {
        if x.len() != self.input_dim || h.len() != self.hidden_dim || c.len() != self.hidden_dim {
            return shape_err(format!(
                "lstm step expects x[{}], h[{}], c[{}]; got x[{}], h[{}], c[{}]",
                self.input_dim,
                self.hidden_dim,
                self.hidden_dim,
                x.len(),
                h.len(),
                c.len()
            ));
        }
        Ok(())
    }

    fn gates(&self, z: &[f64]) -> [Vec<f64>; 4] {
        let lin = |w: &Tensor2, b: &[f64], act: fn(f64) -> f64| -> Vec<f64> {
            (0..self.hidden_dim).map(|j| act(dot(w.row(j), z) + b[j])).collect()
        };
        [
            lin(&self.w_input, &self.b_input, sigmoid),
            lin(&self.w_forget, &self.b_forget, sigmoid),
            lin(&self.w_output, &self.b_output, sigmoid),
            lin(&self.w_cell, &self.b_cell, f64::tanh),
        ]
    }

    /// One recurrence step: returns `(h, c)`.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_step(x, h_prev, c_prev)?;
        let z: Vec<f64> = x.iter().chain(h_prev).copied().collect();
        let [i, f, o, g] = self.gates(&z);
        let c: Vec<f64> = (0..self.hidden_dim)
            .map(|j| f[j] * c_prev[j] + i[j] * g[j])
            .collect();
        let h = (0..self.hidden_dim).map(|j| o[j] * c[j].tanh()).collect();
        Ok((h, c))
    }

    /// Runs the recurrence over `inputs` from the zero state.
    pub fn unroll(&self, inputs: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let zero = vec![0.0; self.hidden_dim];
        self.unroll_from(inputs, &zero, &zero)
    }

    /// Runs the recurrence over `inputs` starting at `(h0, c0)`.
    pub fn unroll_from(
        &self,
        inputs: &[Vec<f64>],
        h0: &[f64],
        c0: &[f64],
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("lstm unroll needs at least one step".into()));
        }
        let mut out = Vec::with_capacity(inputs.len());
        let (mut h, mut c) = (h0.to_vec(), c0.to_vec());
        for x in inputs {
            let next = self.step(x, &h, &c)?;
            h.clone_from(&next.0);
            c.clone_from(&next.1);
            out.push(next);
        }
        Ok(out)
    }

    /// Unroll from the zero state, keeping intermediates for BPTT. Returns the
    /// hidden state after each step.
    pub fn unroll_cached(&self, inputs: &[Vec<f64>], masks: LstmMasks) -> Result<(Vec<Vec<f64>>, LstmCache)> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("lstm unroll needs at least one step".into()));
        }
        let hd = self.hidden_dim;
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        self.check_step(&inputs[0], &h, &c)?;
        let mut steps = Vec::with_capacity(inputs.len());
        let mut hs = Vec::with_capacity(inputs.len());
        for (t, x) in inputs.iter().enumerate() {
            self.check_step(x, &h, &c)?;
            let mut z = Vec::with_capacity(self.input_dim + hd);
            match masks.input.as_ref().map(|m| &m[t]) {
                Some(m) => z.extend(x.iter().zip(m).map(|(a, k)| a * k)),
                None => z.extend_from_slice(x),
            }
            match &masks.recurrent {
                Some(m) => z.extend(h.iter().zip(m).map(|(a, k)| a * k)),
                None => z.extend_from_slice(&h),
            }
            let [i, f, o, g] = self.gates(&z);
            let c_new: Vec<f64> = (0..hd).map(|j| f[j] * c[j] + i[j] * g[j]).collect();
            let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..hd).map(|j| o[j] * tanh_c[j]).collect();
            steps.push(StepCache {
                z,
                i,
                f,
                o,
                g,
                c_prev: std::mem::replace(&mut c, c_new),
                tanh_c,
            });
            h = h_new;
            hs.push(h.clone());
        }
        Ok((hs, LstmCache { steps, masks }))
    }

    /// Backpropagation through time. `dh[t]` is the upstream gradient on the
    /// hidden state emitted at step `t`. Returns parameter gradients and the
    /// gradient for each step's input.
    pub fn backward(&self, cache: &LstmCache, dh: &[Vec<f64>]) -> Result<(LstmParams, Vec<Vec<f64>>)> {
        let n = cache.steps.len();
        if dh.len() != n || dh.iter().any(|d| d.len() != self.hidden_dim) {
            return shape_err("upstream hidden gradients do not match cached unroll");
        }
        let hd = self.hidden_dim;
        let id = self.input_dim;
        let mut grads = self.zeros_like();
        let mut dx = vec![Vec::new(); n];
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        for t in (0..n).rev() {
            let s = &cache.steps[t];
            let mut da = [vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]];
            for j in 0..hd {
                let dhj = dh[t][j] + dh_next[j];
                let d_o = dhj * s.tanh_c[j];
                let dc = dhj * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
                let di = dc * s.g[j];
                let dg = dc * s.i[j];
                let df = dc * s.c_prev[j];
                dc_next[j] = dc * s.f[j];
                da[0][j] = di * s.i[j] * (1.0 - s.i[j]);
                da[1][j] = df * s.f[j] * (1.0 - s.f[j]);
                da[2][j] = d_o * s.o[j] * (1.0 - s.o[j]);
                da[3][j] = dg * (1.0 - s.g[j] * s.g[j]);
            }
            let mut dz = vec![0.0; id + hd];
            let weights = [&self.w_input, &self.w_forget, &self.w_output, &self.w_cell];
            let [gwi, gwf, gwo, gwc] = [
                &mut grads.w_input,
                &mut grads.w_forget,
                &mut grads.w_output,
                &mut grads.w_cell,
            ];
            let gw = [gwi, gwf, gwo, gwc];
            let gb = [
                &mut grads.b_input,
                &mut grads.b_forget,
                &mut grads.b_output,
                &mut grads.b_cell,
            ];
            for (gate, (gwt, gbt)) in gw.into_iter().zip(gb).enumerate() {
                for j in 0..hd {
                    let d = da[gate][j];
                    if d != 0.0 {
                        axpy(gwt.row_mut(j), d, &s.z);
                        axpy(&mut dz, d, weights[gate].row(j));
                    }
                    gbt[j] += d;
                }
            }
            let mut dxt = dz[..id].to_vec();
            if let Some(m) = cache.masks.input.as_ref().map(|m| &m[t]) {
                for (v, k) in dxt.iter_mut().zip(m) {
                    *v *= k;
                }
            }
            dx[t] = dxt;
            dh_next = dz[id..].to_vec();
            if let Some(m) = &cache.masks.recurrent {
                for (v, k) in dh_next.iter_mut().zip(m) {
                    *v *= k;
                }
            }
        }
        Ok((grads, dx))
    }
}

impl Parameters for LstmParams {
    fn tensors(&self) -> Vec<(&[f64], bool)> {
        vec![
            (self.w_input.data(), true),
            (self.w_forget.data(), true),
            (self.w_output.data(), true),
            (self.w_cell.data(), true),
            (&self.b_input, false),
            (&self.b_forget, false),
            (&self.b_output, false),
            (&self.b_cell, false),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_input.data_mut(),
            self.w_forget.data_mut(),
            self.w_output.data_mut(),
            self.w_cell.data_mut(),
            &mut self.b_input,
            &mut self.b_forget,
            &mut self.b_output,
            &mut self.b_cell,
        ]
    }
}

/// One LSTM step, free-function form.
pub fn lstm_step(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    p.step(x, h_prev, c_prev)
}

/// Iterated [`lstm_step`] from the zero state.
pub fn lstm_unroll(p: &LstmParams, inputs: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    p.unroll(inputs)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Scalar-by-scalar reference cell written independently of the
    /// vectorized gate code.
    fn reference_step(p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_out = vec![0.0; p.hidden_dim];
        let mut c_out = vec![0.0; p.hidden_dim];
        for j in 0..p.hidden_dim {
            let mut pre = [p.b_input[j], p.b_forget[j], p.b_output[j], p.b_cell[j]];
            for k in 0..p.input_dim + p.hidden_dim {
                let zk = if k < p.input_dim { x[k] } else { h[k - p.input_dim] };
                pre[0] += p.w_input.get(j, k) * zk;
                pre[1] += p.w_forget.get(j, k) * zk;
                pre[2] += p.w_output.get(j, k) * zk;
                pre[3] += p.w_cell.get(j, k) * zk;
            }
            let (i, f, o, g) = (sig(pre[0]), sig(pre[1]), sig(pre[2]), pre[3].tanh());
            c_out[j] = f * c[j] + i * g;
            h_out[j] = o * c_out[j].tanh();
        }
        (h_out, c_out)
    }

    #[test]
    fn zero_params_zero_state_stay_zero() {
        let p = LstmParams::zeros(3, 2);
        let (h, c) = lstm_step(&p, &[1.0, -2.0, 0.5], &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(h, vec![0.0; 2]);
        assert_eq!(c, vec![0.0; 2]);
    }

    #[test]
    fn zero_params_unit_cell_halves() {
        let p = LstmParams::zeros(1, 1);
        let (h, c) = lstm_step(&p, &[0.0], &[0.0], &[1.0]).unwrap();
        assert_eq!(c, vec![0.5]);
        assert!((h[0] - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = LstmParams::init(4, 3, &mut rng);
        let x = [0.3, -0.7, 1.1, 0.05];
        let h = [0.1, -0.2, 0.4];
        let c = [0.5, 0.0, -0.3];
        let (h1, c1) = lstm_step(&p, &x, &h, &c).unwrap();
        let (h2, c2) = reference_step(&p, &x, &h, &c);
        for j in 0..3 {
            assert!((h1[j] - h2[j]).abs() < 1e-12);
            assert!((c1[j] - c2[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn unroll_matches_chained_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LstmParams::init(2, 3, &mut rng);
        let xs = vec![vec![0.1, 0.2], vec![-0.5, 0.3], vec![1.0, -1.0]];
        let states = lstm_unroll(&p, &xs).unwrap();
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for (t, x) in xs.iter().enumerate() {
            let (h2, c2) = lstm_step(&p, x, &h, &c).unwrap();
            assert_eq!(states[t].0, h2);
            assert_eq!(states[t].1, c2);
            h = h2;
            c = c2;
        }
        let single = lstm_unroll(&p, &xs[..1]).unwrap();
        assert_eq!(single[0], lstm_step(&p, &xs[0], &[0.0; 3], &[0.0; 3]).unwrap());
        let (hs, _) = p.unroll_cached(&xs, LstmMasks::default()).unwrap();
        for (t, hc) in states.iter().enumerate() {
            assert_eq!(hs[t], hc.0);
        }
    }

    #[test]
    fn repeated_input_with_zero_params_stays_zero() {
        let p = LstmParams::zeros(2, 2);
        let xs = vec![vec![3.0, 1.0], vec![3.0, 1.0]];
        for (h, c) in lstm_unroll(&p, &xs).unwrap() {
            assert_eq!(h, vec![0.0; 2]);
            assert_eq!(c, vec![0.0; 2]);
        }
    }

    #[test]
    fn empty_sequence_errors() {
        let p = LstmParams::zeros(1, 1);
        assert!(matches!(lstm_unroll(&p, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn bad_dimensions_error() {
        let p = LstmParams::zeros(2, 2);
        assert!(matches!(lstm_step(&p, &[1.0], &[0.0; 2], &[0.0; 2]), Err(Error::Shape(_))));
    }
}
