/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central-difference check of `analytic` against `f` at `x`.
///
/// Returns the largest [`relative_error`] over all components. Vector-valued
/// ops are checked by scalarizing them with a fixed random projection before
/// calling this.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert!((1e-6..=1e-4).contains(&h), "step {h} outside [1e-6, 1e-4]");
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}
