//! Fixed-order reductions.
//!
//! Every functional the crate reports goes through `pairwise_sum`, whose
//! summation tree depends only on the slice length. Results are therefore
//! bit-identical across runs, platforms with IEEE-754 f64, and any worker
//! configuration: parallel callers may compute disjoint chunks, but the
//! combine order is fixed by the data layout, never by scheduling.

const PAIRWISE_LEAF: usize = 64;

/// Sum with a fixed binary reduction tree (Higham's pairwise summation).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Dot product with the same fixed-order tree as `pairwise_sum`.
pub fn pairwise_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= PAIRWISE_LEAF {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    } else {
        let mid = a.len() / 2;
        pairwise_dot(&a[..mid], &b[..mid]) + pairwise_dot(&a[mid..], &b[mid..])
    }
}

/// Sum of `f(x)` over the slice, fixed-order.
pub fn pairwise_map_sum(xs: &[f64], f: impl Fn(f64) -> f64 + Copy) -> f64 {
    if xs.len() <= PAIRWISE_LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += f(x);
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_map_sum(&xs[..mid], f) + pairwise_map_sum(&xs[mid..], f)
    }
}

/// Euclidean norm of the coefficient vector (unweighted l2).
pub fn norm2(xs: &[f64]) -> f64 {
    pairwise_dot(xs, xs).sqrt()
}

/// Maximum value; NaN-propagating on purpose so corruption is visible.
pub fn max_value(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m || x.is_nan() {
            m = x;
        }
    }
    m
}

/// Minimum value; NaN-propagating.
pub fn min_value(xs: &[f64]) -> f64 {
    let mut m = f64::INFINITY;
    for &x in xs {
        if x < m || x.is_nan() {
            m = x;
        }
    }
    m
}

/// Maximum absolute value.
pub fn max_abs(xs: &[f64]) -> f64 {
    let mut m = 0.0f64;
    for &x in xs {
        let a = x.abs();
        if a > m || a.is_nan() {
            m = a;
        }
    }
    m
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_exact_on_integers() {
        let xs: Vec<f64> = (0..10_001).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 10_000.0 * 10_001.0 / 2.0);
    }

    #[test]
    fn pairwise_is_length_deterministic() {
        // Same data, same length, repeated calls: identical bits.
        let xs: Vec<f64> = (0..4097).map(|i| ((i * 2654435761_u64) % 1000) as f64 * 1e-3).collect();
        let a = pairwise_sum(&xs);
        let b = pairwise_sum(&xs);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn dot_and_map_agree_with_sum() {
        let xs: Vec<f64> = (0..513).map(|i| (i as f64).sin()).collect();
        let ones = vec![1.0; xs.len()];
        assert_eq!(pairwise_dot(&xs, &ones).to_bits(), pairwise_sum(&xs).to_bits());
        assert_eq!(pairwise_map_sum(&xs, |x| x).to_bits(), pairwise_sum(&xs).to_bits());
    }

    #[test]
    fn extrema_handle_signs() {
        let xs = [-3.0, 2.0, -7.5, 1.0];
        assert_eq!(max_value(&xs), 2.0);
        assert_eq!(min_value(&xs), -7.5);
        assert_eq!(max_abs(&xs), 7.5);
    }
}
