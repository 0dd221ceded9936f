//! Post-fit inference: the variational observed information matrix by
//! Louis' method, Wald tests, confidence bands and prediction intervals.
//!
//! The information matrix is `E_h[-d2 l_com] - E_h[s s']` over the stacked
//! vector `(kappa, phi, lambda)`, with `h = N(a, A)` and `l_com` the
//! complete-data log-likelihood. The outer product of the marginal score is
//! dropped since it vanishes at the estimates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal as NormalDist};
use statrs::function::erf::erfc;

use crate::error::{GamError, Result};
use crate::linalg;
use crate::model::{self, Family, GamDesign};
use crate::vafit::{FitResult, LAMBDA_MAX, LAMBDA_MIN};

pub const DEFAULT_MC_SAMPLES: usize = 1000;
pub const PREDICTIVE_DRAWS: usize = 10_000;
/// Fewest realizations accepted for a simultaneous band.
pub const MIN_BAND_DRAWS: usize = 1000;
/// Relative MC standard error above which an information entry is flagged.
const MC_SE_WARN: f64 = 0.05;
const MAX_CONDITION: f64 = 1e14;
/// Fraction of the largest possible log-lambda information, `d_j / 2`, below
/// which a smoothing parameter is treated as unidentified.
const FLAT_LAMBDA_INFO: f64 = 1e-3;

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    NormalDist::standard().inverse_cdf(p)
}

fn check_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GamError::InvalidArgument(format!("level must lie in (0, 1), got {level}")));
    }
    Ok(1.0 - level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationMatrix {
    pub matrix: DMatrix<f64>,
    /// Draws used for the Monte Carlo blocks (0 when everything is analytic).
    pub mc_samples: usize,
    pub seed: u64,
    pub parameter_labels: Vec<String>,
    pub n_kappa: usize,
    pub has_phi: bool,
    /// Smoothing parameters sitting on a clamp, or whose log-scale information
    /// has vanished because the smooth was shrunk to zero. They are held fixed
    /// when the matrix is inverted.
    pub lambda_at_boundary: Vec<bool>,
    pub warnings: Vec<String>,
}

impl InformationMatrix {
    fn lambda_offset(&self) -> usize {
        self.n_kappa + usize::from(self.has_phi)
    }

    /// Indices of the parameters treated as free when inverting.
    fn active(&self) -> Vec<usize> {
        let off = self.lambda_offset();
        (0..self.matrix.nrows())
            .filter(|&i| i < off || !self.lambda_at_boundary[i - off])
            .collect()
    }

    /// Inverse over the free parameters, computed after scaling the matrix
    /// to unit diagonal. Rows and columns of boundary smoothing parameters
    /// are zero.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let idx = self.active();
        let k = idx.len();
        let sub = DMatrix::from_fn(k, k, |i, j| self.matrix[(idx[i], idx[j])]);
        let scale: Vec<f64> = (0..k)
            .map(|i| {
                let v = sub[(i, i)];
                if v > 0.0 && v.is_finite() {
                    Ok(1.0 / v.sqrt())
                } else {
                    Err(GamError::Singular {
                        what: "information matrix",
                        condition: f64::INFINITY,
                    })
                }
            })
            .collect::<Result<_>>()?;
        let scaled = DMatrix::from_fn(k, k, |i, j| sub[(i, j)] * scale[i] * scale[j]);
        let sv = scaled.clone().svd(false, false).singular_values;
        let condition = sv.max() / sv.min();
        if !(condition < MAX_CONDITION) {
            return Err(GamError::Singular {
                what: "information matrix",
                condition,
            });
        }
        let inv_scaled = scaled.lu().try_inverse().ok_or(GamError::Singular {
            what: "information matrix",
            condition,
        })?;
        let mut out = DMatrix::zeros(self.matrix.nrows(), self.matrix.ncols());
        for i in 0..k {
            for j in 0..k {
                out[(idx[i], idx[j])] = inv_scaled[(i, j)] * scale[i] * scale[j];
            }
        }
        linalg::symmetrize(&mut out);
        Ok(out)
    }

    /// Covariance of `kappa_hat`: the kappa block of the inverse.
    pub fn kappa_covariance(&self) -> Result<DMatrix<f64>> {
        let inv = self.inverse()?;
        let p = self.n_kappa;
        let block = inv.view((0, 0), (p, p)).into_owned();
        if p > 0 && nalgebra::Cholesky::new(block.clone()).is_none() {
            return Err(GamError::Singular {
                what: "kappa block of the inverse information",
                condition: f64::INFINITY,
            });
        }
        Ok(block)
    }
}

/// Moments of the penalty quadratics `Q_j = beta_j' S_j beta_j` under `N(a, A)`.
struct SmoothMoments {
    /// `E[s_lambda_j] = d_j / (2 lambda_j) - E[Q_j] / 2`.
    score_mean: Vec<f64>,
    expected_q: Vec<f64>,
    /// `A[:, j] S_j a_j`, the covariance of `beta` with `Q_j` divided by 2.
    a_s_a: Vec<DVector<f64>>,
    /// `Cov(Q_j, Q_k)`.
    q_cov: DMatrix<f64>,
}

fn smooth_moments(design: &GamDesign, fit: &FitResult, cov: &DMatrix<f64>) -> SmoothMoments {
    let q = design.q();
    let a = &fit.vparams.a;
    let mut score_mean = Vec::with_capacity(q);
    let mut expected_q = Vec::with_capacity(q);
    let mut a_s_a = Vec::with_capacity(q);
    let mut s_a = Vec::with_capacity(q);
    for j in 0..q {
        let r = design.block_range(j);
        let s = &design.bases[j].penalty;
        let aj = a.rows(r.start, r.len());
        let sa = s * aj;
        let quad = aj.dot(&sa);
        let tr = s.component_mul(&cov.view((r.start, r.start), (r.len(), r.len()))).sum();
        let eq = quad + tr;
        expected_q.push(eq);
        let lambda = fit.params.lambda[j];
        score_mean.push(r.len() as f64 / (2.0 * lambda) - 0.5 * eq);
        a_s_a.push(cov.columns(r.start, r.len()) * &sa);
        s_a.push(sa);
    }
    let mut q_cov = DMatrix::zeros(q, q);
    for j in 0..q {
        let rj = design.block_range(j);
        let sj = &design.bases[j].penalty;
        for k in j..q {
            let rk = design.block_range(k);
            let sk = &design.bases[k].penalty;
            let ajk = cov.view((rj.start, rk.start), (rj.len(), rk.len()));
            // tr(S_j A_jk S_k A_kj) = sum((S_j A_jk) o (A_jk S_k))
            let left = sj * ajk;
            let right = ajk * sk;
            let tr = left.component_mul(&right).sum();
            let cross = s_a[j].dot(&(ajk * &s_a[k]));
            let v = 2.0 * tr + 4.0 * cross;
            q_cov[(j, k)] = v;
            q_cov[(k, j)] = v;
        }
    }
    SmoothMoments {
        score_mean,
        expected_q,
        a_s_a,
        q_cov,
    }
}

fn labels(p: usize, has_phi: bool, q: usize) -> Vec<String> {
    let mut out: Vec<String> = (1..=p).map(|k| format!("kappa{k}")).collect();
    if has_phi {
        out.push("phi".into());
    }
    out.extend((1..=q).map(|j| format!("lambda{j}")));
    out
}

/// Variational observed information over `(kappa, phi, lambda)`.
///
/// Normal and Poisson expectations are exact. For Bernoulli the `kappa`
/// rows are averaged over `mc_samples` draws from `N(a, A)`.
pub fn louis_information(fit: &FitResult, design: &GamDesign, mc_samples: usize, seed: u64) -> Result<InformationMatrix> {
    if !fit.converged {
        return Err(GamError::InvalidArgument(
            "information requires a converged fit".into(),
        ));
    }
    let out = information_at(fit, design, mc_samples, seed)?;
    out.kappa_covariance()?;
    Ok(out)
}

/// The information matrix at the parameters in `fit`, whether or not they
/// are a stationary point.
pub(crate) fn information_at(fit: &FitResult, design: &GamDesign, mc_samples: usize, seed: u64) -> Result<InformationMatrix> {
    if fit.family != design.family {
        return Err(GamError::FamilyMismatch {
            expected: fit.family.name(),
            actual: design.family.name(),
        });
    }
    if fit.params.kappa.len() != design.p() || fit.vparams.dim() != design.d() {
        return Err(GamError::DimensionMismatch("fit does not match design".into()));
    }
    let p = design.p();
    let q = design.q();
    let has_phi = design.family.has_dispersion();
    let off = p + usize::from(has_phi);
    let dim = off + q;
    let cov = fit.vparams.cov();
    let sm = smooth_moments(design, fit, &cov);

    let mut info = DMatrix::zeros(dim, dim);
    let mut warnings = Vec::new();
    let mut used_samples = 0;

    // lambda block, shared by every family.
    for j in 0..q {
        let lambda = fit.params.lambda[j];
        let dj = design.bases[j].basis_dim as f64;
        for k in 0..q {
            let ess = sm.score_mean[j] * sm.score_mean[k] + 0.25 * sm.q_cov[(j, k)];
            let neg_h = if j == k { dj / (2.0 * lambda * lambda) } else { 0.0 };
            info[(off + j, off + k)] = neg_h - ess;
        }
    }

    match design.family {
        Family::Normal => normal_blocks(fit, design, &cov, &sm, &mut info),
        Family::Poisson => poisson_blocks(fit, design, &cov, &sm, &mut info)?,
        Family::Bernoulli => {
            if mc_samples < 2 {
                return Err(GamError::InvalidArgument("at least two Monte Carlo samples are required".into()));
            }
            used_samples = mc_samples;
            bernoulli_blocks(fit, design, mc_samples, seed, &mut info, &mut warnings)?;
        }
    }
    linalg::symmetrize(&mut info);

    let lambda_at_boundary = (0..q)
        .map(|j| {
            let l = fit.params.lambda[j];
            let k = p + usize::from(has_phi) + j;
            let log_scale_info = info[(k, k)] * l * l;
            l >= LAMBDA_MAX
                || l <= LAMBDA_MIN
                || fit.diagnostics.lambda_capped.get(j).copied().unwrap_or(false)
                || log_scale_info <= FLAT_LAMBDA_INFO * design.bases[j].basis_dim as f64 / 2.0
        })
        .collect();
    Ok(InformationMatrix {
        matrix: info,
        mc_samples: used_samples,
        seed,
        parameter_labels: labels(p, has_phi, q),
        n_kappa: p,
        has_phi,
        lambda_at_boundary,
        warnings,
    })
}

fn normal_blocks(fit: &FitResult, design: &GamDesign, cov: &DMatrix<f64>, sm: &SmoothMoments, info: &mut DMatrix<f64>) {
    let p = design.p();
    let q = design.q();
    let n = design.n() as f64;
    let phi = fit.params.phi;
    let x = &design.x;
    let z = &design.z;
    let r = &design.y - x * &fit.params.kappa - z * &fit.vparams.a;
    let xr = x.transpose() * &r;
    let xz = x.transpose() * z;
    let ztz = z.transpose() * z;
    let a_ztz = cov * &ztz;
    let trv = a_ztz.trace();
    let rr = r.norm_squared();
    let ztr = z.transpose() * &r;
    let a_ztr = cov * &ztr;
    let r_v_r = ztr.dot(&a_ztr);
    let tr_v2 = a_ztz.component_mul(&a_ztz.transpose()).sum();

    // kappa, kappa
    let xx = x.transpose() * x;
    let ess_kk = (&xr * xr.transpose() + &xz * cov * xz.transpose()) / (phi * phi);
    let i_kk = xx / phi - ess_kk;
    info.view_mut((0, 0), (p, p)).copy_from(&i_kk);

    // kappa, phi
    let e_eee = &xr * (rr + trv) + &xz * &a_ztr * 2.0;
    let ess_kphi = (-&xr * (n / (2.0 * phi)) + e_eee / (2.0 * phi * phi)) / phi;
    let neg_h_kphi = &xr / (phi * phi);
    for k in 0..p {
        let v = neg_h_kphi[k] - ess_kphi[k];
        info[(k, p)] = v;
        info[(p, k)] = v;
    }

    // phi, phi
    let es_phi = -n / (2.0 * phi) + (rr + trv) / (2.0 * phi * phi);
    let var_ee = 2.0 * tr_v2 + 4.0 * r_v_r;
    let ess_phiphi = es_phi * es_phi + var_ee / (4.0 * phi.powi(4));
    let neg_h_phiphi = -n / (2.0 * phi * phi) + (rr + trv) / phi.powi(3);
    info[(p, p)] = neg_h_phiphi - ess_phiphi;

    // kappa, lambda and phi, lambda
    let a_ztz_a = &a_ztz * cov;
    for j in 0..q {
        let rj = design.block_range(j);
        let col = p + 1 + j;
        let ess = (&xr * sm.score_mean[j] + &xz * &sm.a_s_a[j]) / phi;
        for k in 0..p {
            info[(k, col)] = -ess[k];
            info[(col, k)] = -ess[k];
        }
        let tr = a_ztz_a
            .view((rj.start, rj.start), (rj.len(), rj.len()))
            .component_mul(&design.bases[j].penalty)
            .sum();
        let cov_ee_q = -4.0 * ztr.dot(&sm.a_s_a[j]) + 2.0 * tr;
        let ess = es_phi * sm.score_mean[j] - cov_ee_q / (4.0 * phi * phi);
        info[(p, col)] = -ess;
        info[(col, p)] = -ess;
    }
}

fn poisson_blocks(
    fit: &FitResult,
    design: &GamDesign,
    cov: &DMatrix<f64>,
    sm: &SmoothMoments,
    info: &mut DMatrix<f64>,
) -> Result<()> {
    let p = design.p();
    let n = design.n();
    let x = &design.x;
    let z = &design.z;
    let eta = model::linear_predictor(design, &fit.params.kappa, &fit.vparams.a)?;
    let za = z * cov;
    let v = &za * z.transpose();
    let m = DVector::from_fn(n, |i, _| (eta[i] + 0.5 * v[(i, i)]).exp());
    if let Some(i) = m.iter().position(|v| !v.is_finite()) {
        return Err(GamError::Overflow {
            index: i,
            value: eta[i] + 0.5 * v[(i, i)],
        });
    }
    let resid = &design.y - &m;
    let mut outer = &resid * resid.transpose();
    for i in 0..n {
        for k in 0..n {
            outer[(i, k)] += m[i] * m[k] * v[(i, k)].exp_m1();
        }
    }
    let neg_h = linalg::weighted_gram(x, &m);
    let ess = x.transpose() * outer * x;
    info.view_mut((0, 0), (p, p)).copy_from(&(neg_h - ess));

    for j in 0..design.q() {
        let rj = design.block_range(j);
        let s = &design.bases[j].penalty;
        let tr = sm.expected_q[j] - {
            let aj = fit.vparams.a.rows(rj.start, rj.len());
            aj.dot(&(s * aj))
        };
        let dj = rj.len() as f64;
        let cj = dj / (2.0 * fit.params.lambda[j]);
        // Under exp(z_i' beta) N(a, A) the mean shifts to a + A z_i.
        let mut vec = DVector::zeros(n);
        for i in 0..n {
            let b = fit.vparams.a.rows(rj.start, rj.len()) + za.view((i, rj.start), (1, rj.len())).transpose();
            let e_mu_q = m[i] * (b.dot(&(s * &b)) + tr);
            vec[i] = resid[i] * cj - 0.5 * (design.y[i] * sm.expected_q[j] - e_mu_q);
        }
        let ess = x.transpose() * vec;
        for k in 0..p {
            info[(k, p + j)] = -ess[k];
            info[(p + j, k)] = -ess[k];
        }
    }
    Ok(())
}

fn bernoulli_blocks(
    fit: &FitResult,
    design: &GamDesign,
    draws: usize,
    seed: u64,
    info: &mut DMatrix<f64>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let p = design.p();
    let q = design.q();
    let d = design.d();
    let n = design.n();
    let cols = p + q;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = DMatrix::from_fn(d, draws, |_, _| StandardNormal.sample(&mut rng));
    let mut beta = fit.vparams.factor() * xi;
    for mut c in beta.column_iter_mut() {
        c += &fit.vparams.a;
    }
    let xk = &design.x * &fit.params.kappa;
    let etas = &design.z * &beta;

    // Per-draw values of each (kappa row, column) entry of the information.
    let mut sum = DMatrix::<f64>::zeros(p, cols);
    let mut sum_sq = DMatrix::<f64>::zeros(p, cols);
    let mut w = DVector::zeros(n);
    let mut resid = DVector::zeros(n);
    for g in 0..draws {
        for i in 0..n {
            let mu = model::logistic(xk[i] + etas[(i, g)]);
            w[i] = mu * (1.0 - mu);
            resid[i] = design.y[i] - mu;
        }
        let u = design.x.transpose() * &resid;
        let entry = linalg::weighted_gram(&design.x, &w) - &u * u.transpose();
        let mut lam = DMatrix::zeros(p, q);
        for j in 0..q {
            let r = design.block_range(j);
            let bj = beta.view((r.start, g), (r.len(), 1));
            let qj = (bj.transpose() * &design.bases[j].penalty * bj)[(0, 0)];
            let s = r.len() as f64 / (2.0 * fit.params.lambda[j]) - 0.5 * qj;
            lam.column_mut(j).copy_from(&(-&u * s));
        }
        for k in 0..p {
            for c in 0..cols {
                let v = if c < p { entry[(k, c)] } else { lam[(k, c - p)] };
                sum[(k, c)] += v;
                sum_sq[(k, c)] += v * v;
            }
        }
    }
    let g = draws as f64;
    let mean = &sum / g;
    // Bernoulli has no dispersion, so lambda_j sits at column p + j.
    for k in 0..p {
        for c in 0..cols {
            info[(k, c)] = mean[(k, c)];
            info[(c, k)] = mean[(k, c)];
        }
    }
    // Flag entries whose Monte Carlo error is large relative to their size,
    // ignoring entries that are negligible against the diagonal.
    let mut flagged = Vec::new();
    for k in 0..p {
        for c in k..cols {
            let m = mean[(k, c)];
            let var = (sum_sq[(k, c)] / g - m * m).max(0.0) * g / (g - 1.0);
            let se = (var / g).sqrt();
            let scale = (info[(k, k)].abs() * info[(c, c)].abs()).sqrt();
            if m.abs() > 1e-3 * scale && se > MC_SE_WARN * m.abs() {
                flagged.push(format!("({k},{c})"));
            }
        }
    }
    if !flagged.is_empty() {
        warnings.push(format!(
            "Monte Carlo standard error exceeds {}% of the entry for {} information entries [{}]; consider more samples than {draws}",
            MC_SE_WARN * 100.0,
            flagged.len(),
            flagged.join(", ")
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricEstimate {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub z_value: f64,
    pub p_value: f64,
}

/// Normal-theory Wald table from estimates and their covariance.
pub fn wald_table(labels: &[String], estimates: &DVector<f64>, cov: &DMatrix<f64>, level: f64) -> Result<Vec<ParametricEstimate>> {
    let alpha = check_level(level)?;
    if cov.nrows() != estimates.len() || cov.ncols() != estimates.len() || labels.len() != estimates.len() {
        return Err(GamError::DimensionMismatch("estimates, covariance and labels differ in size".into()));
    }
    let zq = normal_quantile(1.0 - alpha / 2.0);
    (0..estimates.len())
        .map(|k| {
            let se = cov[(k, k)].sqrt();
            if !(se > 0.0 && se.is_finite()) {
                return Err(GamError::Singular {
                    what: "standard error (zero-width interval)",
                    condition: f64::INFINITY,
                });
            }
            let est = estimates[k];
            let z = est / se;
            Ok(ParametricEstimate {
                label: labels[k].clone(),
                estimate: est,
                std_error: se,
                lower: est - zq * se,
                upper: est + zq * se,
                z_value: z,
                p_value: erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0),
            })
        })
        .collect()
}

/// Estimates, standard errors, intervals and two-sided p-values for `kappa`.
pub fn parametric_wald(fit: &FitResult, info: &InformationMatrix, level: f64) -> Result<Vec<ParametricEstimate>> {
    if info.n_kappa != fit.params.kappa.len() {
        return Err(GamError::DimensionMismatch("information does not match fit".into()));
    }
    let cov = info.kappa_covariance()?;
    wald_table(&info.parameter_labels[..info.n_kappa], &fit.params.kappa, &cov, level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTestResult {
    pub covariate_index: usize,
    pub wald_stat: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// `W = a_j' (A^-1)_jj a_j` against a chi-squared law with `d_j` degrees of freedom.
pub fn smooth_wald_test(fit: &FitResult, design: &GamDesign, j: usize) -> Result<SmoothTestResult> {
    check_smooth_index(design, j)?;
    let l = fit.vparams.factor();
    let diag = l.diagonal();
    let condition = (diag.max() / diag.min()).powi(2);
    if !(condition < MAX_CONDITION) {
        return Err(GamError::Singular {
            what: "variational covariance",
            condition,
        });
    }
    let prec = linalg::spd_inverse(&fit.vparams.cov(), "variational covariance")?;
    let r = design.block_range(j);
    let aj = fit.vparams.a.rows(r.start, r.len());
    let w = (aj.transpose() * prec.view((r.start, r.start), (r.len(), r.len())) * aj)[(0, 0)].max(0.0);
    let dof = r.len();
    let chi = ChiSquared::new(dof as f64).map_err(|e| GamError::InvalidArgument(e.to_string()))?;
    Ok(SmoothTestResult {
        covariate_index: j,
        wald_stat: w,
        dof,
        p_value: if w == 0.0 { 1.0 } else { chi.sf(w) },
    })
}

fn check_smooth_index(design: &GamDesign, j: usize) -> Result<()> {
    if j >= design.q() {
        return Err(GamError::InvalidArgument(format!(
            "smooth index {j} out of range (model has {})",
            design.q()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandKind {
    Pointwise,
    Simultaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub grid: Vec<f64>,
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub kind: BandKind,
    pub level: f64,
    pub critical_value: f64,
}

/// Centered basis rows on the grid, the curve estimate and its standard deviation.
fn band_pieces(fit: &FitResult, design: &GamDesign, j: usize, grid: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>, DMatrix<f64>)> {
    check_smooth_index(design, j)?;
    if grid.is_empty() {
        return Err(GamError::InvalidArgument("band grid is empty".into()));
    }
    let basis = &design.bases[j];
    let (lo, hi) = basis.covariate_range;
    let slack = 1e-12 * (hi - lo);
    if let Some(v) = grid.iter().find(|v| !(**v >= lo - slack && **v <= hi + slack)) {
        return Err(GamError::InvalidArgument(format!(
            "grid value {v} outside the covariate range [{lo}, {hi}]"
        )));
    }
    let zg = basis.evaluate(grid)?;
    let r = design.block_range(j);
    let aj = fit.vparams.a.rows(r.start, r.len());
    let cov = fit.vparams.cov();
    let cj = cov.view((r.start, r.start), (r.len(), r.len())).into_owned();
    let center: Vec<f64> = (&zg * aj).iter().copied().collect();
    let zc = &zg * &cj;
    let sd: Vec<f64> = (0..grid.len())
        .map(|l| zc.row(l).dot(&zg.row(l)).max(0.0).sqrt())
        .collect();
    Ok((zg, center, sd, cj))
}

fn band(grid: &[f64], center: Vec<f64>, sd: &[f64], crit: f64, kind: BandKind, level: f64) -> BandResult {
    BandResult {
        grid: grid.to_vec(),
        lower: center.iter().zip(sd).map(|(c, s)| c - crit * s).collect(),
        upper: center.iter().zip(sd).map(|(c, s)| c + crit * s).collect(),
        center,
        kind,
        level,
        critical_value: crit,
    }
}

/// `z' a_j +/- z_{1-alpha/2} sqrt(z' A_j z)` on the linear-predictor scale.
pub fn pointwise_band(fit: &FitResult, design: &GamDesign, j: usize, grid: &[f64], level: f64) -> Result<BandResult> {
    let alpha = check_level(level)?;
    let (_, center, sd, _) = band_pieces(fit, design, j, grid)?;
    Ok(band(grid, center, &sd, normal_quantile(1.0 - alpha / 2.0), BandKind::Pointwise, level))
}

/// Band whose critical value is the empirical `1 - alpha/2` quantile of the
/// largest standardized deviation `|z'(beta_j - a_j)| / sd` over the grid,
/// with `beta ~ N(a, A)` drawn `draws` times.
pub fn simultaneous_band(
    fit: &FitResult,
    design: &GamDesign,
    j: usize,
    grid: &[f64],
    level: f64,
    draws: usize,
    seed: u64,
) -> Result<BandResult> {
    let alpha = check_level(level)?;
    if draws < MIN_BAND_DRAWS {
        return Err(GamError::InvalidArgument(format!(
            "a simultaneous band needs at least {MIN_BAND_DRAWS} realizations, got {draws}"
        )));
    }
    let (zg, center, sd, cj) = band_pieces(fit, design, j, grid)?;
    let stats = max_standardized_deviations(&zg, &sd, &cj, draws, seed)?;
    let crit = linalg::quantile_sorted(&stats, 1.0 - alpha / 2.0);
    Ok(band(grid, center, &sd, crit, BandKind::Simultaneous, level))
}

/// Sorted `C_g` values.
fn max_standardized_deviations(zg: &DMatrix<f64>, sd: &[f64], cov: &DMatrix<f64>, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let dj = cov.nrows();
    let l = robust_factor(cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = DMatrix::from_fn(dj, draws, |_, _| StandardNormal.sample(&mut rng));
    let dev = zg * (l * xi);
    let mut stats: Vec<f64> = (0..draws)
        .map(|g| {
            (0..zg.nrows())
                .filter(|&row| sd[row] > 0.0)
                .map(|row| (dev[(row, g)] / sd[row]).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    Ok(stats)
}

/// Cholesky factor of a covariance block, allowing an exactly zero block.
fn robust_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(cov.clone());
    }
    Ok(linalg::cholesky(cov, "smooth covariance block")?.l())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub eta: f64,
    pub mu: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Posterior-predictive intervals for new rows: draw `eta ~ N(x'kappa + z'a, z'Az)`,
/// then a response from the family, and take empirical quantiles.
pub fn predict(
    fit: &FitResult,
    x_new: &DMatrix<f64>,
    z_new: &DMatrix<f64>,
    level: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let alpha = check_level(level)?;
    if x_new.ncols() != fit.params.kappa.len() || z_new.ncols() != fit.vparams.dim() || x_new.nrows() != z_new.nrows() {
        return Err(GamError::DimensionMismatch(format!(
            "new data is {}x{} parametric and {}x{} smooth, fit expects {} and {} columns",
            x_new.nrows(),
            x_new.ncols(),
            z_new.nrows(),
            z_new.ncols(),
            fit.params.kappa.len(),
            fit.vparams.dim()
        )));
    }
    if draws == 0 {
        return Err(GamError::InvalidArgument("predictive draws must be positive".into()));
    }
    let eta = x_new * &fit.params.kappa + z_new * &fit.vparams.a;
    let var = model::offsets_from_factor(z_new, fit.vparams.factor()) * 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_sd = fit.params.phi.sqrt();
    let mut sample = vec![0.0; draws];
    let mut out = Vec::with_capacity(eta.len());
    for i in 0..eta.len() {
        let centre = eta[i];
        let sd = var[i].max(0.0).sqrt();
        let lp = Normal::new(centre, sd).map_err(|_| GamError::NonFinite {
            what: "predictive linear predictor",
            index: i,
        })?;
        for s in sample.iter_mut() {
            let e: f64 = lp.sample(&mut rng);
            *s = match fit.family {
                Family::Normal => e + noise_sd * rng_normal(&mut rng),
                Family::Poisson => {
                    let mu = e.exp();
                    if mu == 0.0 {
                        0.0
                    } else {
                        Poisson::new(mu)
                            .map_err(|_| GamError::Overflow { index: i, value: e })?
                            .sample(&mut rng)
                    }
                }
                Family::Bernoulli => {
                    let b = Bernoulli::new(model::logistic(e)).map_err(|_| GamError::Overflow { index: i, value: e })?;
                    f64::from(u8::from(b.sample(&mut rng)))
                }
            };
        }
        sample.sort_by(f64::total_cmp);
        let mu = fit.family.inverse_link(centre);
        if !mu.is_finite() {
            return Err(GamError::Overflow { index: i, value: centre });
        }
        out.push(Prediction {
            eta: centre,
            mu,
            lower: linalg::quantile_sorted_inverse_cdf(&sample, alpha / 2.0),
            upper: linalg::quantile_sorted_inverse_cdf(&sample, 1.0 - alpha / 2.0),
        });
    }
    Ok(out)
}

fn rng_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
