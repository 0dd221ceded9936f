//! Variational lower bound and the coordinate-ascent fit.
//!
//! The smooth coefficients get a Gaussian variational law `N(a, A)`. For
//! fixed `A` the bound in `(kappa, a)` is a penalized GLM log-likelihood with
//! offset `0.5 z_i' A z_i`, solved by penalized IRLS. `A` then takes a
//! (damped) fixed-point step, `phi` a closed-form step for the normal
//! family, and each `lambda_j` its closed-form maximizer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{GamError, Result};
use crate::linalg;
use crate::model::{self, CovStructure, Family, GamDesign, ModelParams, VariationalParams};
use crate::splines::SmoothBasis;

pub const LAMBDA_MIN: f64 = 1e-8;
pub const LAMBDA_MAX: f64 = 1e8;
pub const PHI_FLOOR: f64 = 1e-10;
/// Smallest fixed-point step tried before the `A` update gives up.
pub const DAMPING_FLOOR: f64 = 1.0 / 1024.0;
/// Bound change, relative to `1 + |bound|`, treated as a tie when damping
/// an `A` step. Ties are accepted only if the fixed-point residual shrinks.
pub const DAMPING_TOLERANCE: f64 = 1e-10;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaUpdate {
    ClosedForm,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub max_outer_iters: usize,
    /// Relative change of the lower bound between outer iterations.
    pub tol_lowerbound: f64,
    /// Max-abs change of `kappa`, `a`, `A`, `phi` and `1/lambda`.
    pub tol_params: f64,
    pub inner_irls_iters: usize,
    /// Initial step of the `A` fixed-point update; halved until accepted.
    pub fixedpoint_damping: f64,
    pub lambda_update: LambdaUpdate,
    pub structure: CovStructure,
    /// Starting value for every smoothing parameter.
    pub initial_lambda: f64,
    /// Also run each outer cycle from the plain log-lambda step stretched by
    /// an adaptive factor, keeping whichever cycle reaches the higher bound.
    pub lambda_acceleration: bool,
    pub seed: u64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            max_outer_iters: 500,
            tol_lowerbound: 1e-6,
            tol_params: 1e-6,
            inner_irls_iters: 25,
            fixedpoint_damping: 1.0,
            lambda_update: LambdaUpdate::ClosedForm,
            structure: CovStructure::Unstructured,
            initial_lambda: 1.0,
            lambda_acceleration: true,
            seed: 0,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_lowerbound > 0.0 && self.tol_params > 0.0) {
            return Err(GamError::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.fixedpoint_damping > 0.0 && self.fixedpoint_damping <= 1.0) {
            return Err(GamError::InvalidArgument(format!(
                "damping must lie in (0, 1], got {}",
                self.fixedpoint_damping
            )));
        }
        if self.max_outer_iters == 0 || self.inner_irls_iters == 0 {
            return Err(GamError::InvalidArgument("iteration limits must be positive".into()));
        }
        if !(self.initial_lambda > 0.0) {
            return Err(GamError::InvalidArgument("initial lambda must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Smooths whose last lambda update hit a clamp or a vanishing denominator.
    pub lambda_capped: Vec<bool>,
    /// Outer iterations in which the `A` step had to be damped.
    pub damped_a_steps: usize,
    /// Outer iterations in which no damped `A` step improved the bound.
    pub damping_floor_hits: usize,
    /// Coefficient updates that hit the inner iteration limit.
    pub irls_nonconverged: usize,
    /// Outer cycles started from an overrelaxed lambda and kept.
    pub accelerated_steps: usize,
    /// Overrelaxed cycles discarded because the plain cycle reached a higher bound.
    pub rejected_accelerations: usize,
    pub final_relative_change: f64,
    pub final_param_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub vparams: VariationalParams,
    pub lower_bound_trace: Vec<f64>,
    pub converged: bool,
    pub n_iters: usize,
    pub family: Family,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn lower_bound(&self) -> f64 {
        self.lower_bound_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Fitted linear predictor `X kappa + Z a` on the design.
    pub fn linear_predictor(&self, design: &GamDesign) -> Result<DVector<f64>> {
        model::linear_predictor(design, &self.params.kappa, &self.vparams.a)
    }
}

/// Starting point for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct InitialValues {
    pub params: ModelParams,
    pub vparams: VariationalParams,
}

/// The three pieces of the bound: expected log-likelihood, expected log
/// prior of the smooth coefficients, and the entropy of the variational law.
/// All normalizing constants are kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub data: f64,
    pub smooth_prior: f64,
    pub entropy: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.data + self.smooth_prior + self.entropy
    }
}

pub fn lower_bound(design: &GamDesign, params: &ModelParams, vparams: &VariationalParams) -> Result<f64> {
    Ok(lower_bound_terms(design, params, vparams)?.total())
}

pub fn lower_bound_terms(
    design: &GamDesign,
    params: &ModelParams,
    vparams: &VariationalParams,
) -> Result<BoundTerms> {
    check_dims(design, params, vparams)?;
    let eta = model::linear_predictor(design, &params.kappa, &vparams.a)?;
    let offsets = model::offsets_from_factor(&design.z, vparams.factor());
    let data = data_term(design.family, &design.y, &eta, &offsets, params.phi)?;
    Ok(BoundTerms {
        data,
        smooth_prior: smooth_prior_term(design, &params.lambda, vparams),
        entropy: entropy_term(vparams),
    })
}

fn check_dims(design: &GamDesign, params: &ModelParams, vparams: &VariationalParams) -> Result<()> {
    if params.kappa.len() != design.p() || params.lambda.len() != design.q() || vparams.dim() != design.d() {
        return Err(GamError::DimensionMismatch(format!(
            "parameters (p={}, q={}, d={}) do not match design (p={}, q={}, d={})",
            params.kappa.len(),
            params.lambda.len(),
            vparams.dim(),
            design.p(),
            design.q(),
            design.d()
        )));
    }
    Ok(())
}

/// Expected log-likelihood of the responses. For Bernoulli this is the
/// second Jensen bound `y eta - ln(1 + exp(eta + offset))`.
pub fn data_term(
    family: Family,
    y: &DVector<f64>,
    eta: &DVector<f64>,
    offsets: &DVector<f64>,
    phi: f64,
) -> Result<f64> {
    let n = y.len();
    let mut total = 0.0;
    match family {
        Family::Poisson => {
            for i in 0..n {
                let m = eta[i] + offsets[i];
                let mu = m.exp();
                if !mu.is_finite() {
                    return Err(GamError::Overflow { index: i, value: m });
                }
                total += y[i] * eta[i] - mu - ln_gamma(y[i] + 1.0);
            }
        }
        Family::Normal => {
            let mut ss = 0.0;
            for i in 0..n {
                let r = y[i] - eta[i];
                if !r.is_finite() {
                    return Err(GamError::Overflow { index: i, value: eta[i] });
                }
                ss += r * r + 2.0 * offsets[i];
            }
            total = -0.5 * n as f64 * (LN_2PI + phi.ln()) - ss / (2.0 * phi);
        }
        Family::Bernoulli => {
            for i in 0..n {
                let m = eta[i] + offsets[i];
                if !m.is_finite() {
                    return Err(GamError::Overflow { index: i, value: m });
                }
                total += y[i] * eta[i] - model::softplus(m);
            }
        }
    }
    Ok(total)
}

/// Per-smooth `(a_j' S_j a_j, tr(S_j A_j))`.
pub(crate) fn smooth_quadratics(design_bases: &[SmoothBasis], vparams: &VariationalParams) -> Vec<(f64, f64)> {
    let l = vparams.factor();
    let mut start = 0;
    design_bases
        .iter()
        .map(|basis| {
            let dj = basis.basis_dim;
            let aj = vparams.a.rows(start, dj);
            let quad = (aj.transpose() * &basis.penalty * aj)[(0, 0)];
            let lj = l.rows(start, dj);
            let slj = &basis.penalty * lj;
            let tr = slj.component_mul(&lj).sum();
            start += dj;
            (quad, tr)
        })
        .collect()
}

fn smooth_prior_term(design: &GamDesign, lambda: &DVector<f64>, vparams: &VariationalParams) -> f64 {
    smooth_quadratics(&design.bases, vparams)
        .into_iter()
        .zip(&design.bases)
        .enumerate()
        .map(|(j, ((quad, tr), basis))| {
            let dj = basis.basis_dim as f64;
            let log_det_s = linalg::cholesky(&basis.penalty, "penalty")
                .map(|c| linalg::log_det_from_factor(&c.l()))
                .unwrap_or(f64::NEG_INFINITY);
            0.5 * (dj * lambda[j].ln() - lambda[j] * (quad + tr)) + 0.5 * log_det_s - 0.5 * dj * LN_2PI
        })
        .sum()
}

fn entropy_term(vparams: &VariationalParams) -> f64 {
    0.5 * vparams.log_det() + 0.5 * vparams.dim() as f64 * (1.0 + LN_2PI)
}

/// Analytic gradient of the lower bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundGradient {
    pub kappa: DVector<f64>,
    pub a: DVector<f64>,
    /// Gradient with respect to the lower Cholesky factor of `A`
    /// (upper triangle is zero).
    pub chol: DMatrix<f64>,
    /// Normal family only.
    pub phi: Option<f64>,
    pub lambda: DVector<f64>,
}

pub fn lower_bound_gradient(
    design: &GamDesign,
    params: &ModelParams,
    vparams: &VariationalParams,
) -> Result<BoundGradient> {
    check_dims(design, params, vparams)?;
    let eta = model::linear_predictor(design, &params.kappa, &vparams.a)?;
    let offsets = model::offsets_from_factor(&design.z, vparams.factor());
    let phi = params.phi;
    let n = design.n();
    let (resid, weights) = working_quantities(design.family, &design.y, &eta, &offsets, phi)?;

    let s_lambda = design.penalty_matrix(&params.lambda);
    let l = vparams.factor();
    let kappa = design.x.transpose() * &resid;
    let a = design.z.transpose() * &resid - &s_lambda * &vparams.a;
    let zwz = linalg::weighted_gram(&design.z, &weights);
    let mut chol = (-(&zwz * l) - &s_lambda * l).lower_triangle();
    for k in 0..l.nrows() {
        chol[(k, k)] += 1.0 / l[(k, k)];
    }
    let phi_grad = if design.family.has_dispersion() {
        let ss: f64 = (0..n).map(|i| (design.y[i] - eta[i]).powi(2) + 2.0 * offsets[i]).sum();
        Some(-0.5 * n as f64 / phi + ss / (2.0 * phi * phi))
    } else {
        None
    };
    let lambda = DVector::from_iterator(
        design.q(),
        smooth_quadratics(&design.bases, vparams)
            .into_iter()
            .enumerate()
            .map(|(j, (quad, tr))| 0.5 * (design.bases[j].basis_dim as f64 / params.lambda[j] - quad - tr)),
    );
    Ok(BoundGradient {
        kappa,
        a,
        chol,
        phi: phi_grad,
        lambda,
    })
}

/// Per-observation derivative of the data term in `eta` and the weight
/// multiplying `z_i z_i'` in its derivative in `A` (times -2).
fn working_quantities(
    family: Family,
    y: &DVector<f64>,
    eta: &DVector<f64>,
    offsets: &DVector<f64>,
    phi: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = y.len();
    let mut resid = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let m = eta[i] + offsets[i];
        let mean = match family {
            Family::Poisson => {
                let mu = m.exp();
                if !mu.is_finite() {
                    return Err(GamError::Overflow { index: i, value: m });
                }
                mu
            }
            Family::Normal => eta[i],
            Family::Bernoulli => model::logistic(m),
        };
        match family {
            Family::Normal => {
                resid[i] = (y[i] - mean) / phi;
                w[i] = 1.0 / phi;
            }
            _ => {
                resid[i] = y[i] - mean;
                w[i] = mean;
            }
        }
    }
    Ok((resid, w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientUpdate {
    pub kappa: DVector<f64>,
    pub a: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Joint `(kappa, a)` step for fixed `A` and `lambda`.
pub fn update_coefficients(
    design: &GamDesign,
    params: &ModelParams,
    vparams: &VariationalParams,
    settings: &FitSettings,
) -> Result<CoefficientUpdate> {
    check_dims(design, params, vparams)?;
    let p = design.p();
    let d = design.d();
    let c = stack_columns(&design.x, &design.z);
    let mut penalty = DMatrix::zeros(p + d, p + d);
    penalty
        .view_mut((p, p), (d, d))
        .copy_from(&design.penalty_matrix(&params.lambda));
    let offsets = match design.family {
        Family::Normal => DVector::zeros(design.n()),
        _ => model::offsets_from_factor(&design.z, vparams.factor()),
    };
    let mut theta0 = DVector::zeros(p + d);
    theta0.rows_mut(0, p).copy_from(&params.kappa);
    theta0.rows_mut(p, d).copy_from(&vparams.a);

    let out = penalized_irls(
        design.family,
        &c,
        &design.y,
        &offsets,
        &penalty,
        params.phi,
        theta0,
        settings.inner_irls_iters,
    );
    Ok(CoefficientUpdate {
        kappa: out.theta.rows(0, p).into_owned(),
        a: out.theta.rows(p, d).into_owned(),
        iterations: out.iterations,
        converged: out.converged,
    })
}

fn stack_columns(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(x.nrows(), x.ncols() + z.ncols());
    c.columns_mut(0, x.ncols()).copy_from(x);
    c.columns_mut(x.ncols(), z.ncols()).copy_from(z);
    c
}

pub(crate) struct IrlsOutcome {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Penalized objective `sum_i [y_i eta_i - b(eta_i + o_i)] - 0.5 theta' P theta`.
fn penalized_objective(
    family: Family,
    c: &DMatrix<f64>,
    y: &DVector<f64>,
    offsets: &DVector<f64>,
    penalty: &DMatrix<f64>,
    theta: &DVector<f64>,
) -> f64 {
    let eta = c * theta;
    let mut ll = 0.0;
    for i in 0..y.len() {
        let m = eta[i] + offsets[i];
        ll += match family {
            Family::Poisson => y[i] * eta[i] - m.exp(),
            Family::Bernoulli => y[i] * eta[i] - model::softplus(m),
            Family::Normal => -0.5 * (y[i] - eta[i]).powi(2),
        };
    }
    let pen = 0.5 * (theta.transpose() * penalty * theta)[(0, 0)];
    let v = ll - pen;
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

/// Newton (IRLS) ascent with step halving. The normal family is one exact
/// solve of `(C'C + phi P) theta = C'y`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn penalized_irls(
    family: Family,
    c: &DMatrix<f64>,
    y: &DVector<f64>,
    offsets: &DVector<f64>,
    penalty: &DMatrix<f64>,
    phi: f64,
    theta0: DVector<f64>,
    max_iter: usize,
) -> IrlsOutcome {
    let ct = c.transpose();
    if family == Family::Normal {
        let mut h = &ct * c + penalty * phi;
        linalg::symmetrize(&mut h);
        let rhs = &ct * y;
        if let Some(ch) = robust_cholesky(h) {
            return IrlsOutcome {
                theta: ch.solve(&rhs),
                iterations: 1,
                converged: true,
            };
        }
        return IrlsOutcome {
            theta: theta0,
            iterations: 1,
            converged: false,
        };
    }

    let mut theta = theta0;
    let mut f = penalized_objective(family, c, y, offsets, penalty, &theta);
    let mut previous_decrement = f64::INFINITY;
    for iter in 1..=max_iter {
        let eta = c * &theta;
        let mut resid = DVector::zeros(y.len());
        let mut w = DVector::zeros(y.len());
        for i in 0..y.len() {
            let m = eta[i] + offsets[i];
            let (mu, wi) = match family {
                Family::Poisson => {
                    let mu = m.exp().min(f64::MAX / 4.0);
                    (mu, mu)
                }
                _ => {
                    let mu = model::logistic(m);
                    (mu, mu * (1.0 - mu))
                }
            };
            resid[i] = y[i] - mu;
            w[i] = wi;
        }
        let grad = &ct * resid - penalty * &theta;
        let h = linalg::weighted_gram(c, &w) + penalty;
        let Some(ch) = robust_cholesky(h) else {
            return IrlsOutcome {
                theta,
                iterations: iter,
                converged: false,
            };
        };
        let delta = ch.solve(&grad);
        let decrement = grad.dot(&delta);
        let scale = 1.0 + f.abs();
        let quadratic = decrement <= NEWTON_FULL_STEP * scale;
        // Inside the quadratic region each step squares the decrement; once it
        // stops shrinking only rounding is left.
        if !(decrement > NEWTON_DECREMENT_FLOOR * scale) || (quadratic && decrement > 0.5 * previous_decrement) {
            return IrlsOutcome {
                theta,
                iterations: iter,
                converged: true,
            };
        }
        previous_decrement = decrement;
        if quadratic {
            // Objective differences are at rounding level here, so the
            // full Newton step is taken without a line search.
            theta += &delta;
            f = penalized_objective(family, c, y, offsets, penalty, &theta);
            continue;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &theta + &delta * step;
            let ft = penalized_objective(family, c, y, offsets, penalty, &trial);
            if ft >= f {
                theta = trial;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent direction left at working precision.
            return IrlsOutcome {
                theta,
                iterations: iter,
                converged: true,
            };
        }
    }
    IrlsOutcome {
        theta,
        iterations: max_iter,
        converged: false,
    }
}

/// Newton decrement, relative to the objective, below which full steps are taken.
const NEWTON_FULL_STEP: f64 = 1e-6;
/// Newton decrement, relative to the objective, treated as zero.
const NEWTON_DECREMENT_FLOOR: f64 = 1e-24;

/// Cholesky, retrying once with a small diagonal jitter.
fn robust_cholesky(mut h: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = nalgebra::Cholesky::new(h.clone()) {
        return Some(c);
    }
    let jitter = 1e-10 * (h.trace().abs() / h.nrows() as f64).max(1e-300);
    for i in 0..h.nrows() {
        h[(i, i)] += jitter;
    }
    nalgebra::Cholesky::new(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AUpdate {
    pub vparams: VariationalParams,
    /// Fixed-point step actually taken (0 when none was accepted).
    pub step: f64,
    pub damping_floor_reached: bool,
}

/// Covariance step. Normal: closed form `(S_lambda + Z'Z/phi)^-1`. Poisson
/// and Bernoulli: one fixed-point step `(S_lambda + Z'WZ)^-1` with weights at
/// the current `A`, halved toward the current value until the bound clearly
/// rises, or ties while the fixed-point residual shrinks.
pub fn update_a(
    design: &GamDesign,
    params: &ModelParams,
    vparams: &VariationalParams,
    settings: &FitSettings,
) -> Result<AUpdate> {
    check_dims(design, params, vparams)?;
    let proposal = covariance_proposal(design, params, vparams)?;

    if design.family == Family::Normal {
        return Ok(AUpdate {
            vparams: VariationalParams::from_cov(vparams.a.clone(), &proposal, vparams.structure)?,
            step: 1.0,
            damping_floor_reached: false,
        });
    }

    let current_bound = lower_bound(design, params, vparams)?;
    let tie = DAMPING_TOLERANCE * (1.0 + current_bound.abs());
    let current = vparams.cov();
    let residual = (&proposal - &current).amax();
    let mut step = settings.fixedpoint_damping;
    while step >= DAMPING_FLOOR {
        let cov = if step == 1.0 {
            proposal.clone()
        } else {
            &current * (1.0 - step) + &proposal * step
        };
        if let Ok(trial) = VariationalParams::from_cov(vparams.a.clone(), &cov, vparams.structure) {
            if let Ok(b) = lower_bound(design, params, &trial) {
                let accept = b > current_bound + tie
                    || (b >= current_bound - tie
                        && covariance_proposal(design, params, &trial)
                            .is_ok_and(|next| (next - &cov).amax() < residual));
                if accept {
                    return Ok(AUpdate {
                        vparams: trial,
                        step,
                        damping_floor_reached: false,
                    });
                }
            }
        }
        step *= 0.5;
    }
    Ok(AUpdate {
        vparams: vparams.clone(),
        step: 0.0,
        damping_floor_reached: true,
    })
}

/// Undamped fixed-point target `(S_lambda + Z'WZ)^-1` at the current state.
fn covariance_proposal(design: &GamDesign, params: &ModelParams, vparams: &VariationalParams) -> Result<DMatrix<f64>> {
    let eta = model::linear_predictor(design, &params.kappa, &vparams.a)?;
    let offsets = model::offsets_from_factor(&design.z, vparams.factor());
    let (_, weights) = working_quantities(design.family, &design.y, &eta, &offsets, params.phi)?;
    let mut target = design.penalty_matrix(&params.lambda) + linalg::weighted_gram(&design.z, &weights);
    linalg::symmetrize(&mut target);
    invert_structured(design, &target, vparams.structure)
}

fn invert_structured(design: &GamDesign, target: &DMatrix<f64>, structure: CovStructure) -> Result<DMatrix<f64>> {
    match structure {
        CovStructure::Unstructured => linalg::spd_inverse(target, "covariance update"),
        CovStructure::BlockDiagonal => {
            let d = design.d();
            let mut out = DMatrix::zeros(d, d);
            for j in 0..design.q() {
                let r = design.block_range(j);
                let block = target.view((r.start, r.start), (r.len(), r.len())).into_owned();
                let inv = linalg::spd_inverse(&block, "covariance update")?;
                out.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&inv);
            }
            Ok(out)
        }
    }
}

/// `phi = n^-1 sum_i [(y_i - eta_i)^2 + z_i' A z_i]`, floored at [`PHI_FLOOR`].
pub fn update_phi(design: &GamDesign, params: &ModelParams, vparams: &VariationalParams) -> Result<f64> {
    if design.family != Family::Normal {
        return Err(GamError::FamilyMismatch {
            expected: "normal",
            actual: design.family.name(),
        });
    }
    check_dims(design, params, vparams)?;
    let eta = model::linear_predictor(design, &params.kappa, &vparams.a)?;
    let offsets = model::offsets_from_factor(&design.z, vparams.factor());
    let n = design.n();
    let ss: f64 = (0..n).map(|i| (design.y[i] - eta[i]).powi(2) + 2.0 * offsets[i]).sum();
    Ok((ss / n as f64).max(PHI_FLOOR))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaStep {
    pub lambda: DVector<f64>,
    /// Set where the update was clamped to `[LAMBDA_MIN, LAMBDA_MAX]`.
    pub capped: Vec<bool>,
}

/// `lambda_j = d_j / (tr(S_j A_j) + a_j' S_j a_j)`.
pub fn update_lambda(bases: &[SmoothBasis], vparams: &VariationalParams) -> Result<LambdaStep> {
    let d: usize = bases.iter().map(|b| b.basis_dim).sum();
    if d != vparams.dim() {
        return Err(GamError::DimensionMismatch(format!(
            "bases span {d} coefficients, variational mean has {}",
            vparams.dim()
        )));
    }
    let mut lambda = DVector::zeros(bases.len());
    let mut capped = vec![false; bases.len()];
    for (j, ((quad, tr), basis)) in smooth_quadratics(bases, vparams).into_iter().zip(bases).enumerate() {
        let denom = quad + tr;
        let raw = if denom < 1e-12 {
            LAMBDA_MAX
        } else {
            basis.basis_dim as f64 / denom
        };
        let clamped = raw.clamp(LAMBDA_MIN, LAMBDA_MAX);
        capped[j] = denom < 1e-12 || clamped != raw;
        lambda[j] = clamped;
    }
    Ok(LambdaStep { lambda, capped })
}

/// Default starting point: `kappa` from a GLM of `y` on `X`, `a = 0`,
/// `A = (S_lambda + Z'Z)^-1`, and for the normal family `phi` from the
/// parametric-only residuals.
pub fn initial_values(design: &GamDesign, settings: &FitSettings) -> Result<InitialValues> {
    let p = design.p();
    let n = design.n();
    let glm = penalized_irls(
        design.family,
        &design.x,
        &design.y,
        &DVector::zeros(n),
        &DMatrix::zeros(p, p),
        1.0,
        DVector::zeros(p),
        100,
    );
    let kappa = glm.theta;
    let phi = if design.family.has_dispersion() {
        let r = &design.y - &design.x * &kappa;
        (r.norm_squared() / n as f64).max(PHI_FLOOR)
    } else {
        1.0
    };
    let lambda = DVector::from_element(design.q(), settings.initial_lambda);
    let ones = DVector::from_element(design.q(), 1.0);
    let mut target = design.penalty_matrix(&ones) + design.z.transpose() * &design.z;
    linalg::symmetrize(&mut target);
    let cov = invert_structured(design, &target, settings.structure)?;
    Ok(InitialValues {
        params: ModelParams { kappa, phi, lambda },
        vparams: VariationalParams::from_cov(DVector::zeros(design.d()), &cov, settings.structure)?,
    })
}

/// Coordinate ascent: coefficients, then `A`, then `phi` (normal), then
/// `lambda`, until both the relative bound change and the parameter change
/// fall under their tolerances.
pub fn fit(design: &GamDesign, settings: &FitSettings, init: Option<&InitialValues>) -> Result<FitResult> {
    settings.validate()?;
    let start = match init {
        Some(v) => v.clone(),
        None => initial_values(design, settings)?,
    };
    start.params.validate()?;
    check_dims(design, &start.params, &start.vparams)?;
    let mut params = start.params;
    let mut vparams = start.vparams;
    vparams.structure = settings.structure;

    let mut diagnostics = FitDiagnostics {
        lambda_capped: vec![false; design.q()],
        ..Default::default()
    };
    let accelerate = settings.lambda_acceleration && settings.lambda_update == LambdaUpdate::ClosedForm;
    let mut trace = Vec::new();
    let mut previous_bound = lower_bound(design, &params, &vparams)?;
    let mut previous_snapshot = snapshot(&params, &vparams);
    let mut converged = false;
    let mut n_iters = 0;
    let mut overrelax = 1.0;
    let mut previous_step = DVector::<f64>::zeros(design.q());

    for iter in 1..=settings.max_outer_iters {
        n_iters = iter;
        let mut cycle = outer_cycle(design, params.clone(), vparams.clone(), settings)?;
        let log_in = params.lambda.map(f64::ln);
        let step = cycle.params.lambda.map(f64::ln) - &log_in;
        // Only components drifting the same way as in the previous cycle are stretched.
        let stretch = DVector::from_fn(step.len(), |i, _| {
            let s = step[i];
            let drifting = s.abs() > ACCELERATION_MIN_STEP && s * previous_step[i] > 0.0;
            if drifting { overrelax } else { 1.0 }
        });
        previous_step = step.clone();
        if accelerate && stretch.max() > 1.0 {
            let mut trial = params.clone();
            trial.lambda = (log_in + step.component_mul(&stretch)).map(|v| v.exp().clamp(LAMBDA_MIN, LAMBDA_MAX));
            let stretched = trial.lambda.map(f64::ln);
            let fast = outer_cycle(design, trial, vparams.clone(), settings)?;
            let tie = DAMPING_TOLERANCE * (1.0 + cycle.bound.abs());
            let settles = || (fast.params.lambda.map(f64::ln) - &stretched).amax() < step.amax();
            if fast.bound > cycle.bound + tie || (fast.bound >= cycle.bound - tie && settles()) {
                diagnostics.accelerated_steps += 1;
                overrelax = (2.0 * overrelax).min(MAX_OVERRELAXATION);
                cycle = fast;
            } else {
                diagnostics.rejected_accelerations += 1;
                overrelax = 1.0;
            }
        } else if accelerate && overrelax <= 1.0 && cycle.bound >= previous_bound {
            overrelax = 2.0;
        }
        diagnostics.irls_nonconverged += cycle.irls_nonconverged as usize;
        diagnostics.damped_a_steps += cycle.damped as usize;
        diagnostics.damping_floor_hits += cycle.floor_hit as usize;
        if let Some(capped) = cycle.lambda_capped {
            diagnostics.lambda_capped = capped;
        }
        params = cycle.params;
        vparams = cycle.vparams;

        let bound = cycle.bound;
        trace.push(bound);
        let rel = (bound - previous_bound).abs() / previous_bound.abs().max(1.0);
        let current_snapshot = snapshot(&params, &vparams);
        let change = linalg::max_abs_diff(&current_snapshot, &previous_snapshot);
        diagnostics.final_relative_change = rel;
        diagnostics.final_param_change = change;
        previous_bound = bound;
        previous_snapshot = current_snapshot;
        if rel < settings.tol_lowerbound && change < settings.tol_params {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        params,
        vparams,
        lower_bound_trace: trace,
        converged,
        n_iters,
        family: design.family,
        diagnostics,
    })
}

/// Largest overrelaxation factor for log-lambda steps.
const MAX_OVERRELAXATION: f64 = 1024.0;
/// Log-lambda step below which plain updates are used.
const ACCELERATION_MIN_STEP: f64 = 1e-11;

struct OuterCycle {
    params: ModelParams,
    vparams: VariationalParams,
    bound: f64,
    lambda_capped: Option<Vec<bool>>,
    irls_nonconverged: bool,
    damped: bool,
    floor_hit: bool,
}

/// One pass of coefficients, `A`, `phi` and `lambda` updates.
fn outer_cycle(
    design: &GamDesign,
    mut params: ModelParams,
    mut vparams: VariationalParams,
    settings: &FitSettings,
) -> Result<OuterCycle> {
    let coef = update_coefficients(design, &params, &vparams, settings)?;
    params.kappa = coef.kappa;
    vparams.a = coef.a;
    let a_step = update_a(design, &params, &vparams, settings)?;
    vparams = a_step.vparams;
    if design.family.has_dispersion() {
        params.phi = update_phi(design, &params, &vparams)?;
    }
    let mut lambda_capped = None;
    if settings.lambda_update == LambdaUpdate::ClosedForm {
        let step = update_lambda(&design.bases, &vparams)?;
        params.lambda = step.lambda;
        lambda_capped = Some(step.capped);
    }
    let bound = lower_bound(design, &params, &vparams)?;
    Ok(OuterCycle {
        params,
        vparams,
        bound,
        lambda_capped,
        irls_nonconverged: !coef.converged,
        damped: a_step.step < 1.0,
        floor_hit: a_step.damping_floor_reached,
    })
}

/// Parameters compared between outer iterations. Smoothing parameters enter
/// on the log scale, since they range over many orders of magnitude.
fn snapshot(params: &ModelParams, vparams: &VariationalParams) -> Vec<f64> {
    let mut v: Vec<f64> = params.kappa.iter().copied().collect();
    v.extend(vparams.a.iter());
    v.extend(linalg::vech(&vparams.cov()));
    v.push(params.phi);
    v.extend(params.lambda.iter().map(|l| l.ln()));
    v
}
