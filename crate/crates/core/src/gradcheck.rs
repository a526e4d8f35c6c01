//! Finite-difference verification of analytic gradients (test support).

/// Compares analytic gradients against central finite differences.
///
/// `f` evaluates the scalar function at the given point and returns its value
/// together with the analytic gradient. Returns the maximum relative error
/// over all coordinates, with the denominator floored at 1 so near-zero
/// gradients are compared absolutely.
pub fn central_difference_check(
    init: &[f64],
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    step: f64,
) -> f64 {
    let (_, analytic) = f(init);
    assert_eq!(analytic.len(), init.len(), "gradient length mismatch");
    let mut point = init.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..init.len() {
        point[i] = init[i] + step;
        let (up, _) = f(&point);
        point[i] = init[i] - step;
        let (down, _) = f(&point);
        point[i] = init[i];
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    max_rel
}
