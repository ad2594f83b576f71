//! Central finite differences for checking hand-written derivatives.

/// Central difference of `f` at `x` for every coordinate, step `h`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise relative error between two gradient vectors.
///
/// Each entry is compared against `max(|a_i|, |b_i|, 1e-3 * scale)` where
/// `scale` is the largest magnitude in either vector, so entries that are
/// zero up to cancellation do not dominate.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}
