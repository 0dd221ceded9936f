//! Centered cubic P-spline bases.
//!
//! Each smoothed covariate is standardized to `[0, 1]` and expanded in a
//! clamped B-spline basis whose breakpoints split the unit interval into `K`
//! equal segments, giving `K + degree` raw functions. The sum-to-zero
//! constraint over the construction sample removes one direction, so the
//! centered basis has `K + degree - 1` columns. The difference penalty is
//! carried through the same transform and then given a small ridge so that
//! it is strictly positive definite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};

/// Relative size of the ridge added to the centered penalty.
pub const PENALTY_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothBasis {
    pub degree: usize,
    /// `K`: number of equal-width segments of the standardized range.
    pub num_interior_knots: usize,
    /// Full clamped knot vector on `[0, 1]`.
    pub knot_sequence: Vec<f64>,
    pub basis_dim: usize,
    /// `(K + degree) x basis_dim`, orthonormal columns orthogonal to the
    /// construction-sample column sums of the raw basis.
    pub centering_transform: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub diff_order: usize,
    pub covariate_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteredDesignBlock {
    pub values: DMatrix<f64>,
    pub column_means_zero: bool,
}

/// `5 * ceil(n^0.18)`.
pub fn knot_count_rule(n: usize) -> usize {
    5 * (n.max(1) as f64).powf(0.18).ceil() as usize
}

pub fn build_basis(
    u: &[f64],
    num_knots: usize,
    degree: usize,
    diff_order: usize,
) -> Result<(SmoothBasis, CenteredDesignBlock)> {
    let n = u.len();
    if num_knots < 2 {
        return Err(GamError::InvalidArgument(format!(
            "at least 2 knots required, got {num_knots}"
        )));
    }
    let raw_dim = num_knots + degree;
    if diff_order == 0 || diff_order >= raw_dim {
        return Err(GamError::InvalidArgument(format!(
            "difference order {diff_order} invalid for {raw_dim} coefficients"
        )));
    }
    let required = num_knots + degree + 1;
    if n < required {
        return Err(GamError::TooFewObservations { n, required });
    }
    if let Some(index) = u.iter().position(|v| !v.is_finite()) {
        return Err(GamError::NonFinite {
            what: "smooth covariate",
            index,
        });
    }
    let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(GamError::DegenerateCovariate { value: lo });
    }

    let knots = clamped_knots(num_knots, degree);
    let raw = raw_design(u, (lo, hi), &knots, degree);

    let col_sums = DVector::from_iterator(raw_dim, raw.column_iter().map(|c| c.sum()));
    let q = orthogonal_complement(&col_sums);
    let values = &raw * &q;

    let raw_pen = difference_penalty(raw_dim, diff_order);
    let mut penalty = q.transpose() * raw_pen * &q;
    crate::linalg::symmetrize(&mut penalty);
    let d = q.ncols();
    let ridge = PENALTY_RIDGE * penalty.trace() / d as f64;
    for i in 0..d {
        penalty[(i, i)] += ridge;
    }

    let column_means_zero = values
        .column_iter()
        .all(|c| (c.sum() / n as f64).abs() < 1e-10);

    let basis = SmoothBasis {
        degree,
        num_interior_knots: num_knots,
        knot_sequence: knots,
        basis_dim: d,
        centering_transform: q,
        penalty,
        diff_order,
        covariate_range: (lo, hi),
    };
    Ok((
        basis,
        CenteredDesignBlock {
            values,
            column_means_zero,
        },
    ))
}

impl SmoothBasis {
    pub fn raw_dim(&self) -> usize {
        self.num_interior_knots + self.degree
    }

    /// Map a covariate value onto `[0, 1]`, clamping to the construction range.
    pub fn standardize(&self, u: f64) -> f64 {
        let (lo, hi) = self.covariate_range;
        ((u.clamp(lo, hi) - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    /// Uncentered B-spline values at one covariate value.
    pub fn raw_row(&self, u: f64) -> Vec<f64> {
        let mut row = vec![0.0; self.raw_dim()];
        bspline_row(self.standardize(u), &self.knot_sequence, self.degree, &mut row);
        row
    }

    pub fn raw_design(&self, u: &[f64]) -> DMatrix<f64> {
        raw_design(u, self.covariate_range, &self.knot_sequence, self.degree)
    }

    /// Unconstrained difference penalty `D'D` on the raw coefficients.
    pub fn raw_penalty(&self) -> DMatrix<f64> {
        difference_penalty(self.raw_dim(), self.diff_order)
    }

    /// Centered basis rows for new covariate values, using the stored
    /// transform. Values outside the construction range are clamped.
    pub fn evaluate(&self, u_new: &[f64]) -> Result<DMatrix<f64>> {
        if let Some(index) = u_new.iter().position(|v| !v.is_finite()) {
            return Err(GamError::NonFinite {
                what: "smooth covariate",
                index,
            });
        }
        Ok(self.raw_design(u_new) * &self.centering_transform)
    }
}

pub fn evaluate_basis(basis: &SmoothBasis, u_new: &[f64]) -> Result<DMatrix<f64>> {
    basis.evaluate(u_new)
}

fn clamped_knots(segments: usize, degree: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(segments + 2 * degree + 1);
    t.extend(std::iter::repeat_n(0.0, degree + 1));
    t.extend((1..segments).map(|k| k as f64 / segments as f64));
    t.extend(std::iter::repeat_n(1.0, degree + 1));
    t
}

fn raw_design(u: &[f64], range: (f64, f64), knots: &[f64], degree: usize) -> DMatrix<f64> {
    let (lo, hi) = range;
    let dim = knots.len() - degree - 1;
    let mut out = DMatrix::zeros(u.len(), dim);
    let mut row = vec![0.0; dim];
    for (i, &v) in u.iter().enumerate() {
        let x = ((v.clamp(lo, hi) - lo) / (hi - lo)).clamp(0.0, 1.0);
        bspline_row(x, knots, degree, &mut row);
        for (k, &b) in row.iter().enumerate() {
            out[(i, k)] = b;
        }
    }
    out
}

/// Cox–de Boor evaluation of all basis functions at `x` in `[0, 1]`.
fn bspline_row(x: f64, knots: &[f64], degree: usize, row: &mut [f64]) {
    row.iter_mut().for_each(|v| *v = 0.0);
    let dim = row.len();
    // Span s with knots[s] <= x < knots[s+1]; the right endpoint belongs to
    // the last non-empty span.
    let mut span = degree;
    while span + 1 < dim && x >= knots[span + 1] {
        span += 1;
    }

    let mut vals = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    vals[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { vals[r] / denom } else { 0.0 };
            vals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        vals[j] = saved;
    }
    for (k, v) in vals.into_iter().enumerate() {
        row[span - degree + k] = v;
    }
}

fn difference_penalty(dim: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..order {
        let rows = d.nrows();
        let next = DMatrix::from_fn(rows - 1, dim, |i, j| d[(i + 1, j)] - d[(i, j)]);
        d = next;
    }
    d.transpose() * d
}

/// Orthonormal basis of the complement of `c`, via one Householder reflection.
fn orthogonal_complement(c: &DVector<f64>) -> DMatrix<f64> {
    let m = c.len();
    let v = c / c.norm();
    let mut w = v.clone();
    let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    w[0] += sign;
    let w = &w / w.norm();
    // H = I - 2ww' maps v onto -sign*e1, so columns 2..m of H span v's
    // orthogonal complement.
    DMatrix::from_fn(m, m - 1, |i, j| {
        let col = j + 1;
        let id = if i == col { 1.0 } else { 0.0 };
        id - 2.0 * w[i] * w[col]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linspace(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn basis_dim_matches_knots_plus_degree_minus_one() {
        let (b, z) = build_basis(&linspace(51), 5, 3, 2).unwrap();
        assert_eq!(b.basis_dim, 7);
        assert_eq!(z.values.ncols(), 7);
        assert_eq!(b.raw_dim(), 8);
        assert_eq!(b.knot_sequence.len(), 5 + 2 * 3 + 1);
    }

    #[test]
    fn centered_columns_have_zero_mean() {
        // 200 draws of a fixed low-discrepancy-free LCG stand-in for U[0,1].
        let mut state = 12345u64;
        let u: Vec<f64> = (0..200)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        let (b, z) = build_basis(&u, 8, 3, 2).unwrap();
        assert_eq!(b.basis_dim, 10);
        assert!(z.column_means_zero);
        for c in z.values.column_iter() {
            assert!((c.sum() / 200.0).abs() < 1e-10);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            build_basis(&linspace(8), 5, 3, 2).unwrap_err(),
            GamError::TooFewObservations { n: 8, required: 9 }
        );
        assert!(matches!(
            build_basis(&[0.3; 20], 5, 3, 2),
            Err(GamError::DegenerateCovariate { .. })
        ));
        let mut u = linspace(20);
        u[4] = f64::NAN;
        assert!(matches!(
            build_basis(&u, 5, 3, 2),
            Err(GamError::NonFinite { index: 4, .. })
        ));
        assert!(build_basis(&linspace(20), 1, 3, 2).is_err());
    }

    #[test]
    fn evaluation_reproduces_construction_block() {
        let u: Vec<f64> = linspace(40).iter().map(|v| 3.0 + 2.0 * v * v).collect();
        let (b, z) = build_basis(&u, 6, 3, 2).unwrap();
        let e = b.evaluate(&u).unwrap();
        assert!((e - &z.values).abs().max() < 1e-12);
        let mid = b.evaluate(&[4.0]).unwrap();
        assert_eq!(mid.shape(), (1, b.basis_dim));
    }

    #[test]
    fn evaluation_clamps_outside_range() {
        let u = linspace(30);
        let (b, _) = build_basis(&u, 5, 3, 2).unwrap();
        let out = b.evaluate(&[-3.0, 7.5]).unwrap();
        let ends = b.evaluate(&[0.0, 1.0]).unwrap();
        assert_eq!(out, ends);
        assert!(b.evaluate(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn knot_rule_values() {
        assert_eq!(knot_count_rule(1), 5);
        assert_eq!(knot_count_rule(100), 15);
        assert_eq!(knot_count_rule(1000), 20);
        // 100^0.18 and 1000^0.18
        assert!((100f64.powf(0.18) - 2.29087).abs() < 1e-5);
        assert!((1000f64.powf(0.18) - 3.46737).abs() < 1e-5);
    }

    #[test]
    fn penalty_is_symmetric_positive_definite() {
        let (b, _) = build_basis(&linspace(60), 8, 3, 2).unwrap();
        let s = &b.penalty;
        assert!((s - s.transpose()).abs().max() < 1e-14);
        assert!(nalgebra::Cholesky::new(s.clone()).is_some());
    }

    #[test]
    fn second_difference_annihilates_linear_coefficients() {
        let (b, _) = build_basis(&linspace(60), 8, 3, 2).unwrap();
        let raw = b.raw_penalty();
        let beta = DVector::from_fn(b.raw_dim(), |i, _| 0.7 * i as f64 - 2.0);
        assert!((beta.transpose() * &raw * &beta)[(0, 0)].abs() < 1e-10);
    }

    #[test]
    fn transform_has_orthonormal_columns() {
        let (b, _) = build_basis(&linspace(60), 6, 3, 2).unwrap();
        let q = &b.centering_transform;
        let gram = q.transpose() * q;
        assert!((gram - DMatrix::identity(b.basis_dim, b.basis_dim)).abs().max() < 1e-12);
    }

    proptest! {
        #[test]
        fn partition_of_unity(points in proptest::collection::vec(0.0f64..1.0, 1000),
                              k in 2usize..20) {
            let (b, _) = build_basis(&linspace(100), k, 3, 2).unwrap();
            let raw = b.raw_design(&points);
            for row in raw.row_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn penalty_spd_for_any_sample(u in proptest::collection::vec(-5.0f64..5.0, 30..120),
                                      k in 2usize..12, order in 1usize..4) {
            prop_assume!(u.len() >= k + 4);
            let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi > lo);
            let (b, z) = build_basis(&u, k, 3, order).unwrap();
            prop_assert!((&b.penalty - b.penalty.transpose()).abs().max() < 1e-14);
            prop_assert!(nalgebra::Cholesky::new(b.penalty.clone()).is_some());
            for c in z.values.column_iter() {
                prop_assert!((c.sum() / u.len() as f64).abs() < 1e-10);
            }
        }
    }
}
