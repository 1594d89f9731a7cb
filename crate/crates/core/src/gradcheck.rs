//! Central finite-difference gradient checks.

/// Step used for central differences in 64-bit arithmetic.
pub const STEP: f64 = 1e-5;

/// Magnitude below which errors are measured against this floor instead of
/// the gradient itself; central-difference round-off is of order
/// `eps * |f| / STEP`, which would otherwise dominate tiny components.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Central-difference gradient of `f` at `params`.
pub fn numeric_gradient<F>(params: &[f64], mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = f(&p);
            p[i] = orig - STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Largest componentwise relative error between `analytic` and the
/// central-difference gradient of `f`.
pub fn max_relative_error<F>(params: &[f64], analytic: &[f64], f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let numeric = numeric_gradient(params, f);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(SCALE_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratics() {
        let f = |p: &[f64]| p[0] * p[0] + 3.0 * p[0] * p[1];
        let p = [1.5, -2.0];
        let g = [2.0 * p[0] + 3.0 * p[1], 3.0 * p[0]];
        assert!(max_relative_error(&p, &g, f) < 1e-9);
        assert!(max_relative_error(&p, &[g[0] + 0.1, g[1]], f) > 1e-2);
    }
}
