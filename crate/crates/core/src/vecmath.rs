//! Small dense-vector helpers shared by the training code.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `(a / |a|, |a|)`, or `None` for a zero or non-finite vector.
pub fn normalized(a: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some((a.iter().map(|x| x / n).collect(), n))
}

/// Backpropagates `grad_out` through `u = v / |v|`, given `u` and `|v|`.
///
/// d/dv = (I - u uᵀ) g / |v|
pub fn normalize_backward(unit: &[f64], len: f64, grad_out: &[f64]) -> Vec<f64> {
    let proj = dot(unit, grad_out);
    unit.iter()
        .zip(grad_out)
        .map(|(u, g)| (g - proj * u) / len)
        .collect()
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
