/// A collection of trainable tensors visited in a fixed order.
///
/// Gradients and optimizer moments are stored in values of the same type, so
/// `tensors()` of a parameter set and of its gradient line up one to one.
pub trait Parameters: Clone {
    /// Every trainable tensor as `(values, is_weight)`. Biases report `false`
    /// and are exempt from L2 regularization.
    fn tensors(&self) -> Vec<(&[f64], bool)>;

    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    /// Same structure with every entry set to zero.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(t, _)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (t, _) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// `self += alpha * other`, tensor by tensor.
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(t, _)| t.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(&src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += alpha * v;
            }
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= alpha;
            }
        }
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(t, _)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient of `0.5 * coef * Σ w²` over weight tensors, added into `grads`.
pub fn add_weight_decay<P: Parameters>(grads: &mut P, params: &P, coef: f64) {
    if coef == 0.0 {
        return;
    }
    let weights: Vec<Option<Vec<f64>>> = params
        .tensors()
        .into_iter()
        .map(|(t, is_weight)| is_weight.then(|| t.to_vec()))
        .collect();
    for (g, w) in grads.tensors_mut().into_iter().zip(&weights) {
        if let Some(w) = w {
            for (gi, wi) in g.iter_mut().zip(w) {
                *gi += coef * wi;
            }
        }
    }
}

/// The penalty whose gradient [`add_weight_decay`] adds.
pub fn weight_decay_penalty<P: Parameters>(params: &P, coef: f64) -> f64 {
    0.5 * coef
        * params
            .tensors()
            .iter()
            .filter(|(_, w)| *w)
            .flat_map(|(t, _)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
}

/// Rescales `grads` so its global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
