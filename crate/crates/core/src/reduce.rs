//! Fixed-shape pairwise summation.
//!
//! The tree shape depends only on the slice length, so the result is the
//! same bit pattern whether the halves are summed on one thread or on two.

const LEAF: usize = 16;
const PARALLEL_CUTOFF: usize = 1 << 14;

pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Same tree as [`pairwise_sum`], large halves evaluated with `rayon::join`.
pub fn par_pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PARALLEL_CUTOFF {
        return pairwise_sum(values);
    }
    let mid = values.len() / 2;
    let (a, b) = rayon::join(
        || par_pairwise_sum(&values[..mid]),
        || par_pairwise_sum(&values[mid..]),
    );
    a + b
}

pub fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Mean and 95% normal-approximation half width of the mean.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let m = mean(values);
    if n < 2 {
        return (m, f64::NAN);
    }
    let ss: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    let var = pairwise_sum(&ss) / (n - 1) as f64;
    (m, 1.96 * (var / n as f64).sqrt())
}
