//! Central-difference gradients, used as the oracle for every analytic
//! backward pass in this crate.

/// Central finite differences of `f` at `theta` with step `h` per coordinate.
pub fn finite_diff_grad<F>(f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite_diff_grad requires h > 0");
    let mut probe = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative-error comparison with an absolute floor, the standard gradient
/// check acceptance rule.
pub fn grad_close(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> bool {
    analytic.len() == numeric.len()
        && analytic.iter().zip(numeric).all(|(&a, &n)| {
            let diff = (a - n).abs();
            diff <= abs_floor.max(rel_tol * a.abs().max(n.abs()))
        })
}
