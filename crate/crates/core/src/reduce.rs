//! Fixed-order reductions over clients.
//!
//! Every cross-client average in the crate goes through these helpers. They
//! visit values in ascending client index with a running mean
//! `m_k = m_{k-1} + (v_k - m_{k-1}) / k`, so results do not depend on how
//! per-client work was scheduled, and a list of identical values averages to
//! exactly that value.

/// Running mean of `values` in index order. Returns `0.0` for an empty slice.
pub fn ordered_mean(values: &[f64]) -> f64 {
    let mut mean = 0.0;
    for (k, &v) in values.iter().enumerate() {
        let count = (k + 1) as f64;
        mean += (v - mean) / count;
    }
    mean
}

/// Entrywise running mean of equal-length vectors, in index order.
///
/// Panics if the vectors differ in length or `vectors` is empty.
pub fn ordered_mean_vec<V: AsRef<[f64]>>(vectors: &[V]) -> Vec<f64> {
    let dim = vectors[0].as_ref().len();
    let mut mean = vec![0.0; dim];
    for (k, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        assert_eq!(v.len(), dim, "ordered_mean_vec: length mismatch");
        let count = (k + 1) as f64;
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += (x - *m) / count;
        }
    }
    mean
}

/// Sequential sum in index order.
pub fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, &v| acc + v)
}

/// Sample variance (divisor `n - 1`); zero for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = ordered_mean(values);
    let ss = values.iter().fold(0.0, |acc, &v| acc + (v - mean) * (v - mean));
    ss / (n - 1) as f64
}

/// Population variance (divisor `n`).
pub fn population_variance(values: &[f64]) -> f64 {
    let mean = ordered_mean(values);
    let sq: Vec<f64> = values.iter().map(|&v| (v - mean) * (v - mean)).collect();
    ordered_mean(&sq)
}
