//! Response families, the assembled design and the parameter containers.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::linalg;
use crate::splines::{self, CenteredDesignBlock, SmoothBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Log link.
    Poisson,
    /// Identity link, unknown dispersion.
    Normal,
    /// Logit link.
    Bernoulli,
}

impl Family {
    pub fn has_dispersion(self) -> bool {
        matches!(self, Family::Normal)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::Normal => "normal",
            Family::Bernoulli => "bernoulli",
        }
    }

    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Poisson => eta.exp(),
            Family::Normal => eta,
            Family::Bernoulli => logistic(eta),
        }
    }

    pub fn validate_response(self, y: &[f64]) -> Result<()> {
        for (row, &v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(GamError::InvalidData {
                    row,
                    message: "response is not finite".into(),
                });
            }
            match self {
                Family::Poisson if v < 0.0 || v.fract() != 0.0 => {
                    return Err(GamError::InvalidData {
                        row,
                        message: format!("Poisson response must be a nonnegative integer, got {v}"),
                    })
                }
                Family::Bernoulli if v != 0.0 && v != 1.0 => {
                    return Err(GamError::InvalidData {
                        row,
                        message: format!("Bernoulli response must be 0 or 1, got {v}"),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = GamError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(Family::Poisson),
            "normal" | "gaussian" => Ok(Family::Normal),
            "bernoulli" | "binomial" | "binary" => Ok(Family::Bernoulli),
            other => Err(GamError::InvalidArgument(format!("unknown family '{other}'"))),
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Knot count, degree and difference order shared by all smooths of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub num_knots: usize,
    pub degree: usize,
    pub diff_order: usize,
}

impl BasisSpec {
    pub fn cubic(num_knots: usize) -> Self {
        BasisSpec {
            num_knots,
            degree: 3,
            diff_order: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamDesign {
    pub family: Family,
    pub y: DVector<f64>,
    /// Parametric design, intercept column included.
    pub x: DMatrix<f64>,
    /// Stacked centered smooth design `[Z_1 ... Z_q]`.
    pub z: DMatrix<f64>,
    pub bases: Vec<SmoothBasis>,
    block_starts: Vec<usize>,
}

impl GamDesign {
    pub fn new(
        family: Family,
        y: DVector<f64>,
        x: DMatrix<f64>,
        smooths: Vec<(SmoothBasis, CenteredDesignBlock)>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n {
            return Err(GamError::DimensionMismatch(format!(
                "parametric design has {} rows, response has {n}",
                x.nrows()
            )));
        }
        family.validate_response(y.as_slice())?;
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(GamError::NonFinite {
                what: "parametric design",
                index,
            });
        }
        check_full_column_rank(&x)?;

        let mut bases = Vec::with_capacity(smooths.len());
        let mut block_starts = Vec::with_capacity(smooths.len());
        let d: usize = smooths.iter().map(|(b, _)| b.basis_dim).sum();
        let mut z = DMatrix::zeros(n, d);
        let mut start = 0;
        for (j, (basis, block)) in smooths.into_iter().enumerate() {
            if block.values.nrows() != n || block.values.ncols() != basis.basis_dim {
                return Err(GamError::DimensionMismatch(format!(
                    "smooth {j}: block is {}x{}, expected {n}x{}",
                    block.values.nrows(),
                    block.values.ncols(),
                    basis.basis_dim
                )));
            }
            z.columns_mut(start, basis.basis_dim).copy_from(&block.values);
            block_starts.push(start);
            start += basis.basis_dim;
            bases.push(basis);
        }
        Ok(GamDesign {
            family,
            y,
            x,
            z,
            bases,
            block_starts,
        })
    }

    /// Build bases for each column of `u` (one slice per smooth) and assemble.
    pub fn from_covariates(
        family: Family,
        y: DVector<f64>,
        x: DMatrix<f64>,
        u: &[Vec<f64>],
        spec: BasisSpec,
    ) -> Result<Self> {
        let smooths = u
            .iter()
            .map(|col| splines::build_basis(col, spec.num_knots, spec.degree, spec.diff_order))
            .collect::<Result<Vec<_>>>()?;
        Self::new(family, y, x, smooths)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.bases.len()
    }

    /// Total smooth dimension `d = sum_j d_j`.
    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    /// Column range of smooth `j` inside the stacked coefficient vector.
    pub fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        let s = self.block_starts[j];
        s..s + self.bases[j].basis_dim
    }

    pub fn z_block(&self, j: usize) -> DMatrix<f64> {
        let r = self.block_range(j);
        self.z.columns(r.start, r.len()).into_owned()
    }

    /// Centered smooth design for new covariate values (one slice per smooth).
    pub fn smooth_design(&self, u_new: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        if u_new.len() != self.q() {
            return Err(GamError::DimensionMismatch(format!(
                "{} smooth columns supplied, model has {}",
                u_new.len(),
                self.q()
            )));
        }
        smooth_design_from_bases(&self.bases, u_new)
    }

    /// Block-diagonal `S_lambda = blockdiag(lambda_j S_j)`.
    pub fn penalty_matrix(&self, lambda: &DVector<f64>) -> DMatrix<f64> {
        let d = self.d();
        let mut s = DMatrix::zeros(d, d);
        for (j, basis) in self.bases.iter().enumerate() {
            let r = self.block_range(j);
            s.view_mut((r.start, r.start), (r.len(), r.len()))
                .copy_from(&(&basis.penalty * lambda[j]));
        }
        s
    }
}

pub fn smooth_design_from_bases(bases: &[SmoothBasis], u_new: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let rows = u_new.first().map_or(0, |c| c.len());
    let d: usize = bases.iter().map(|b| b.basis_dim).sum();
    let mut z = DMatrix::zeros(rows, d);
    let mut start = 0;
    for (basis, col) in bases.iter().zip(u_new) {
        if col.len() != rows {
            return Err(GamError::DimensionMismatch(
                "smooth covariate columns differ in length".into(),
            ));
        }
        let block = basis.evaluate(col)?;
        z.columns_mut(start, basis.basis_dim).copy_from(&block);
        start += basis.basis_dim;
    }
    Ok(z)
}

fn check_full_column_rank(x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() == 0 {
        return Ok(());
    }
    if x.nrows() < x.ncols() {
        return Err(GamError::Singular {
            what: "parametric design",
            condition: f64::INFINITY,
        });
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(min > 1e-10 * max) {
        return Err(GamError::Singular {
            what: "parametric design",
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kappa: DVector<f64>,
    /// Fixed at 1 for Poisson and Bernoulli.
    pub phi: f64,
    pub lambda: DVector<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0) {
            return Err(GamError::InvalidArgument(format!("phi must be positive, got {}", self.phi)));
        }
        if let Some(j) = self.lambda.iter().position(|l| !(*l > 0.0)) {
            return Err(GamError::InvalidArgument(format!(
                "lambda[{j}] must be positive, got {}",
                self.lambda[j]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovStructure {
    #[default]
    Unstructured,
    BlockDiagonal,
}

/// Mean and covariance of the Gaussian variational law over the smooth
/// coefficients. The covariance is held as its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub a: DVector<f64>,
    chol: DMatrix<f64>,
    pub structure: CovStructure,
}

impl VariationalParams {
    pub fn from_cov(a: DVector<f64>, cov: &DMatrix<f64>, structure: CovStructure) -> Result<Self> {
        if cov.nrows() != a.len() || cov.ncols() != a.len() {
            return Err(GamError::DimensionMismatch(format!(
                "covariance is {}x{}, mean has length {}",
                cov.nrows(),
                cov.ncols(),
                a.len()
            )));
        }
        let mut cov = cov.clone();
        linalg::symmetrize(&mut cov);
        let chol = linalg::cholesky(&cov, "variational covariance")?;
        Ok(VariationalParams {
            a,
            chol: chol.l(),
            structure,
        })
    }

    /// From a lower-triangular factor with positive diagonal.
    pub fn from_factor(a: DVector<f64>, chol: DMatrix<f64>, structure: CovStructure) -> Result<Self> {
        let d = a.len();
        if chol.nrows() != d || chol.ncols() != d {
            return Err(GamError::DimensionMismatch("Cholesky factor shape".into()));
        }
        if chol.diagonal().iter().any(|v| !(*v > 0.0)) {
            return Err(GamError::NotPositiveDefinite(
                "Cholesky factor has a non-positive diagonal".into(),
            ));
        }
        Ok(VariationalParams {
            a,
            chol: chol.lower_triangle(),
            structure,
        })
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn cov(&self) -> DMatrix<f64> {
        let mut c = &self.chol * self.chol.transpose();
        linalg::symmetrize(&mut c);
        c
    }

    pub fn log_det(&self) -> f64 {
        linalg::log_det_from_factor(&self.chol)
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }
}

/// `eta_i = x_i' kappa + z_i' coefs`.
pub fn linear_predictor(
    design: &GamDesign,
    kappa: &DVector<f64>,
    coefs: &DVector<f64>,
) -> Result<DVector<f64>> {
    if kappa.len() != design.p() || coefs.len() != design.d() {
        return Err(GamError::DimensionMismatch(format!(
            "kappa {} (expected {}), coefficients {} (expected {})",
            kappa.len(),
            design.p(),
            coefs.len(),
            design.d()
        )));
    }
    Ok(&design.x * kappa + &design.z * coefs)
}

/// `0.5 * z_i' A z_i` for each observation.
pub fn quadratic_form_offsets(design: &GamDesign, cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = design.d();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(GamError::DimensionMismatch(format!(
            "covariance is {}x{}, expected {d}x{d}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = linalg::cholesky(cov, "variational covariance")?;
    Ok(offsets_from_factor(&design.z, &chol.l()))
}

pub(crate) fn offsets_from_factor(z: &DMatrix<f64>, l: &DMatrix<f64>) -> DVector<f64> {
    linalg::row_sq_norms(&(z * l)) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_design(family: Family) -> GamDesign {
        let n = 30;
        let u: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i % 3) as f64 });
        let y = DVector::from_fn(n, |i, _| (i % 2) as f64);
        GamDesign::from_covariates(family, y, x, &[u], BasisSpec::cubic(4)).unwrap()
    }

    #[test]
    fn intercept_only_predictor() {
        let d = toy_design(Family::Normal);
        let kappa = DVector::from_vec(vec![1.5, 0.0]);
        let eta = linear_predictor(&d, &kappa, &DVector::zeros(d.d())).unwrap();
        assert!(eta.iter().all(|v| *v == 1.5));
        assert!(linear_predictor(&d, &DVector::zeros(3), &DVector::zeros(d.d())).is_err());
    }

    #[test]
    fn predictor_matches_direct_product() {
        let d = toy_design(Family::Normal);
        let kappa = DVector::from_vec(vec![0.3, -0.2]);
        let a = DVector::from_fn(d.d(), |i, _| (i as f64).cos());
        let eta = linear_predictor(&d, &kappa, &a).unwrap();
        for i in 0..d.n() {
            let mut direct = 0.0;
            for k in 0..d.p() {
                direct += d.x[(i, k)] * kappa[k];
            }
            for k in 0..d.d() {
                direct += d.z[(i, k)] * a[k];
            }
            assert!((eta[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn offsets_identity_and_triple_product() {
        let d = toy_design(Family::Poisson);
        let id = DMatrix::identity(d.d(), d.d());
        let off = quadratic_form_offsets(&d, &id).unwrap();
        for i in 0..d.n() {
            assert!((off[i] - 0.5 * d.z.row(i).norm_squared()).abs() < 1e-12);
        }
        let l = DMatrix::from_fn(d.d(), d.d(), |i, j| {
            if i > j {
                0.1 * ((i * 7 + j) as f64).sin()
            } else if i == j {
                1.0 + 0.1 * i as f64
            } else {
                0.0
            }
        });
        let cov = &l * l.transpose();
        let off = quadratic_form_offsets(&d, &cov).unwrap();
        for i in 0..d.n() {
            let mut t = 0.0;
            for r in 0..d.d() {
                for c in 0..d.d() {
                    t += d.z[(i, r)] * cov[(r, c)] * d.z[(i, c)];
                }
            }
            assert!((off[i] - 0.5 * t).abs() < 1e-10);
            assert!(off[i] >= 0.0);
        }
        let tiny = DMatrix::identity(d.d(), d.d()) * 1e-14;
        assert!(quadratic_form_offsets(&d, &tiny).unwrap().max() < 1e-12);
        let bad = -DMatrix::identity(d.d(), d.d());
        assert!(matches!(
            quadratic_form_offsets(&d, &bad),
            Err(GamError::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn response_validation_at_construction() {
        let n = 20;
        let u: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = DMatrix::from_element(n, 1, 1.0);
        let mut y = DVector::from_element(n, 1.0);
        y[3] = 2.0;
        let err = GamDesign::from_covariates(Family::Bernoulli, y.clone(), x.clone(), &[u.clone()], BasisSpec::cubic(4))
            .unwrap_err();
        assert!(matches!(err, GamError::InvalidData { row: 3, .. }));
        y[3] = 1.5;
        assert!(matches!(
            GamDesign::from_covariates(Family::Poisson, y.clone(), x.clone(), &[u.clone()], BasisSpec::cubic(4)),
            Err(GamError::InvalidData { row: 3, .. })
        ));
        assert!(GamDesign::from_covariates(Family::Normal, y, x, &[u], BasisSpec::cubic(4)).is_ok());
    }

    #[test]
    fn rank_deficient_parametric_design_rejected() {
        let n = 20;
        let u: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = DMatrix::from_fn(n, 2, |i, _| i as f64);
        let y = DVector::zeros(n);
        assert!(matches!(
            GamDesign::from_covariates(Family::Normal, y, x, &[u], BasisSpec::cubic(4)),
            Err(GamError::Singular { .. })
        ));
    }

    #[test]
    fn design_json_round_trip_is_bit_exact() {
        let d = toy_design(Family::Bernoulli);
        let s = serde_json::to_string(&d).unwrap();
        let back: GamDesign = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.z.iter().zip(d.z.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn family_parsing() {
        assert_eq!("Poisson".parse::<Family>().unwrap(), Family::Poisson);
        assert_eq!("normal".parse::<Family>().unwrap(), Family::Normal);
        assert_eq!("bernoulli".parse::<Family>().unwrap(), Family::Bernoulli);
        assert!("gamma".parse::<Family>().is_err());
        assert!(Family::Normal.has_dispersion());
        assert!(!Family::Poisson.has_dispersion());
    }

    #[test]
    fn stable_logistic_helpers() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
    }
}
