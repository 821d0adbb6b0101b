/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-12;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross entropy of probability `p` against `label`.
pub fn loss_cross_entropy(p: f64, label: bool) -> f64 {
    let p = clamp_prob(p);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Cross entropy of `sigmoid(logit)` and its derivative with respect to the logit.
pub fn cross_entropy_with_logit(logit: f64, label: bool) -> (f64, f64) {
    let p = super::dense::sigmoid(logit);
    let y = if label { 1.0 } else { 0.0 };
    (loss_cross_entropy(p, label), p - y)
}
