use super::params::Parameters;

/// Denominator floor for relative errors, so entries whose true gradient is
/// near zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, over every parameter. Returns the maximum relative error.
pub fn grad_check<P, F>(params: &P, analytic: &P, eps: f64, loss: F) -> f64
where
    P: Parameters,
    F: Fn(&P) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let analytic: Vec<f64> = analytic.flatten();
    let shapes: Vec<usize> = params.tensors().iter().map(|(t, _)| t.len()).collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut flat = 0;
    for (ti, len) in shapes.into_iter().enumerate() {
        for i in 0..len {
            let orig = probe.tensors_mut()[ti][i];
            probe.tensors_mut()[ti][i] = orig + eps;
            let up = loss(&probe);
            probe.tensors_mut()[ti][i] = orig - eps;
            let down = loss(&probe);
            probe.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[flat], numeric));
            flat += 1;
        }
    }
    worst
}
