//! Squared Euclidean distances with 64-bit accumulation.

/// Squared L2 distance between two stored vectors.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Squared L2 distance between a stored vector and a centroid.
#[inline]
pub fn squared_l2_mixed(x: &[f32], c: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), c.len());
    x.iter()
        .zip(c)
        .map(|(&x, &c)| {
            let d = f64::from(x) - c;
            d * d
        })
        .sum()
}
