//! Small dense helpers on top of nalgebra used across the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GamError, Result};

pub(crate) fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| GamError::NotPositiveDefinite(what.to_string()))
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub(crate) fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky(m, what)?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `2 * sum(ln diag(L))` for a lower Cholesky factor.
pub(crate) fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `M' diag(w) M`, computed as a single product.
pub(crate) fn weighted_gram(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = m.clone();
    for (mut row, wi) in scaled.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    let mut g = m.transpose() * scaled;
    symmetrize(&mut g);
    g
}

/// Squared Euclidean norm of each row.
pub(crate) fn row_sq_norms(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.norm_squared()))
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Lower-triangular entries, column-major (the vech ordering).
pub(crate) fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in j..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Empirical quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and non-empty.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Inverse-ECDF quantile (type 1): the smallest order statistic whose
/// empirical CDF reaches `p`. Always returns an observed value.
pub(crate) fn quantile_sorted_inverse_cdf(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((n as f64) * p.clamp(0.0, 1.0)).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vech_stacks_lower_columns() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0]);
        let v = vech(&m);
        assert_eq!(v, vec![1.0, 2.0, 4.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted_inverse_cdf(&s, 0.5), 2.0);
        assert_eq!(quantile_sorted_inverse_cdf(&s, 0.51), 3.0);
        assert_eq!(quantile_sorted_inverse_cdf(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted_inverse_cdf(&s, 1.0), 4.0);
    }

    #[test]
    fn weighted_gram_matches_loop() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 1.0]);
        let w = DVector::from_vec(vec![0.5, 2.0, 1.5]);
        let g = weighted_gram(&m, &w);
        let mut expected = DMatrix::zeros(2, 2);
        for i in 0..3 {
            for a in 0..2 {
                for b in 0..2 {
                    expected[(a, b)] += w[i] * m[(i, a)] * m[(i, b)];
                }
            }
        }
        assert!((g - expected).abs().max() < 1e-14);
    }
}
