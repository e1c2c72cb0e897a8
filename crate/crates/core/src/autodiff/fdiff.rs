//! Central finite differences for gradient checking.

/// Numerically estimate the gradient of `f` at `x` using central differences
/// with per-coordinate step `eps`.
pub fn central_difference(mut f: impl FnMut(&[f32]) -> f32, x: &[f32], eps: f32) -> Vec<f32> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Maximum relative error between an analytic gradient and a numeric one,
/// with an absolute floor so that near-zero entries do not explode the
/// denominator: err_i = |a_i - n_i| / max(floor, |a_i|, |n_i|).
pub fn max_rel_error(analytic: &[f32], numeric: &[f32], floor: f32) -> f32 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / floor.max(a.abs()).max(n.abs()))
        .fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        // f(x) = x0^2 + 3 x1, grad = (2 x0, 3).
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-3);
        assert!((g[0] - 4.0).abs() < 1e-2);
        assert!((g[1] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn rel_error_uses_absolute_floor() {
        // Both near zero: without the floor this would be 1.0.
        let e = max_rel_error(&[1e-9], &[0.0], 1e-4);
        assert!(e < 1e-4);
    }
}
