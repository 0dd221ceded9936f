//! Simulation harness: four smooth terms (two of them correlated pairs), a
//! treatment indicator and three response families.
//!
//! Each replicate draws from its own ChaCha stream (seed, replicate index),
//! so results do not depend on how replicates are scheduled.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::inference::{self, DEFAULT_MC_SAMPLES, PREDICTIVE_DRAWS};
use crate::model::{self, BasisSpec, Family, GamDesign};
use crate::splines::knot_count_rule;
use crate::vafit::{self, FitSettings};

pub const DEFAULT_HOLDOUT: usize = 10;
pub const KAPPA_TRUE: [f64; 2] = [-1.0, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub family: Family,
    pub n: usize,
    pub n_replicates: usize,
    pub n_holdout: usize,
    pub seed: u64,
    pub kappa_true: [f64; 2],
    /// Segments per smooth; `None` uses [`knot_count_rule`] on `n`.
    pub num_knots: Option<usize>,
    pub level: f64,
    pub mc_samples: usize,
    pub predictive_draws: usize,
    pub fit: FitSettings,
}

impl SimScenario {
    pub fn new(family: Family, n: usize, n_replicates: usize, seed: u64) -> Self {
        SimScenario {
            family,
            n,
            n_replicates,
            n_holdout: DEFAULT_HOLDOUT,
            seed,
            kappa_true: KAPPA_TRUE,
            num_knots: None,
            level: 0.95,
            mc_samples: DEFAULT_MC_SAMPLES,
            predictive_draws: PREDICTIVE_DRAWS,
            fit: FitSettings::default(),
        }
    }

    pub fn knots(&self) -> usize {
        self.num_knots.unwrap_or_else(|| knot_count_rule(self.n))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n % 2 != 0 {
            return Err(GamError::InvalidArgument(format!("n must be even and positive, got {}", self.n)));
        }
        if self.n_replicates == 0 {
            return Err(GamError::InvalidArgument("at least one replicate is required".into()));
        }
        if self.n_holdout + 20 > self.n {
            return Err(GamError::InvalidArgument(format!(
                "holdout of {} leaves fewer than 20 training rows out of {}",
                self.n_holdout, self.n
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(GamError::InvalidArgument(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.predictive_draws == 0 {
            return Err(GamError::InvalidArgument("predictive draws must be positive".into()));
        }
        self.fit.validate()
    }
}

pub fn s1(u: f64) -> f64 {
    2.0 * (std::f64::consts::PI * u).sin()
}

pub fn s2(u: f64) -> f64 {
    (2.0 * u).exp()
}

pub fn s3(u: f64) -> f64 {
    0.2 * u.powi(11) * (10.0 * (1.0 - u)).powi(6) + 10.0 * (10.0 * u).powi(3) * (1.0 - u).powi(10)
}

pub fn s4(_u: f64) -> f64 {
    0.0
}

/// One simulated data set with its generating truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub y: DVector<f64>,
    /// Columns: intercept, treatment indicator.
    pub x: DMatrix<f64>,
    /// Four smooth covariates, one vector each.
    pub u: Vec<Vec<f64>>,
    /// Sample-centered smooth values, one vector per term.
    pub smooth_values: Vec<Vec<f64>>,
    pub eta_true: DVector<f64>,
    pub mu_true: DVector<f64>,
    pub kappa: [f64; 2],
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, hi: f64) -> f64 {
    rng.random::<f64>() * hi
}

/// Deterministic in `(scenario.seed, replicate)`.
pub fn simulate_dataset(scenario: &SimScenario, replicate: usize) -> Result<SimDataset> {
    scenario.validate()?;
    let mut rng = replicate_rng(scenario.seed, replicate);
    simulate_with(scenario, &mut rng)
}

fn simulate_with(scenario: &SimScenario, rng: &mut ChaCha8Rng) -> Result<SimDataset> {
    let n = scenario.n;
    let mut u = vec![Vec::with_capacity(n); 4];
    for _ in 0..n {
        let u1 = uniform(rng, 1.0);
        let u3 = uniform(rng, 1.0);
        let e1 = uniform(rng, 0.3);
        let e2 = uniform(rng, 0.1);
        u[0].push(u1);
        u[1].push(0.7 * u1 + e1);
        u[2].push(u3);
        u[3].push(0.9 * u3 + e2);
    }
    let fns: [fn(f64) -> f64; 4] = [s1, s2, s3, s4];
    let smooth_values: Vec<Vec<f64>> = fns
        .iter()
        .zip(&u)
        .map(|(f, col)| {
            let raw: Vec<f64> = col.iter().map(|v| f(*v)).collect();
            let mean = raw.iter().sum::<f64>() / n as f64;
            raw.into_iter().map(|v| v - mean).collect()
        })
        .collect();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 || i < n / 2 { 1.0 } else { 0.0 });
    let kappa = scenario.kappa_true;
    let eta_true = DVector::from_fn(n, |i, _| {
        kappa[0] * x[(i, 0)] + kappa[1] * x[(i, 1)] + smooth_values.iter().map(|s| s[i]).sum::<f64>()
    });
    let mu_true = eta_true.map(|e| scenario.family.inverse_link(e));
    let mut y = DVector::zeros(n);
    for i in 0..n {
        y[i] = match scenario.family {
            Family::Normal => eta_true[i] + rng.sample::<f64, _>(StandardNormal),
            Family::Poisson => Poisson::new(mu_true[i])
                .map_err(|_| GamError::Overflow {
                    index: i,
                    value: eta_true[i],
                })?
                .sample(rng),
            Family::Bernoulli => f64::from(u8::from(rng.random::<f64>() < mu_true[i])),
        };
    }
    Ok(SimDataset {
        y,
        x,
        u,
        smooth_values,
        eta_true,
        mu_true,
        kappa,
    })
}

/// `sum_i [(u_i - l_i) + 2/alpha 1{y_i > u_i} + 2/alpha 1{y_i < l_i}]`.
pub fn interval_score(y: &[f64], lower: &[f64], upper: &[f64], alpha: f64) -> Result<f64> {
    if y.len() != lower.len() || y.len() != upper.len() {
        return Err(GamError::DimensionMismatch("interval score inputs differ in length".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GamError::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut total = 0.0;
    for i in 0..y.len() {
        if lower[i] > upper[i] {
            return Err(GamError::CrossedBounds {
                index: i,
                lower: lower[i],
                upper: upper[i],
            });
        }
        total += upper[i] - lower[i];
        if y[i] > upper[i] {
            total += 2.0 / alpha;
        }
        if y[i] < lower[i] {
            total += 2.0 / alpha;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub mse_eta: f64,
    pub mse_mu: f64,
    pub mse_kappa2: f64,
    pub bias_kappa2: f64,
    /// Wald interval results; absent when the information matrix could not
    /// be inverted.
    pub ci_covered_kappa2: Option<bool>,
    pub ci_width_kappa2: Option<f64>,
    pub interval_score: f64,
    pub interval_width_mean: f64,
    /// Wall-clock seconds of the fit. Left out of every written table.
    #[serde(skip)]
    pub fit_seconds: f64,
    pub converged: bool,
    pub n_iters: usize,
    pub information_error: Option<String>,
}

/// A replicate's data set, its training/validation split and the seeds for
/// the Monte Carlo steps that follow the fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSplit {
    pub data: SimDataset,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    pub info_seed: u64,
    pub predict_seed: u64,
}

/// Validation rows are drawn uniformly without replacement.
pub fn replicate_split(scenario: &SimScenario, replicate: usize) -> Result<ReplicateSplit> {
    scenario.validate()?;
    let mut rng = replicate_rng(scenario.seed, replicate);
    let data = simulate_with(scenario, &mut rng)?;
    let n = scenario.n;
    let mut holdout = rand::seq::index::sample(&mut rng, n, scenario.n_holdout).into_vec();
    holdout.sort_unstable();
    let mut is_holdout = vec![false; n];
    for &i in &holdout {
        is_holdout[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|i| !is_holdout[*i]).collect();
    Ok(ReplicateSplit {
        data,
        train,
        holdout,
        info_seed: rng.next_u64(),
        predict_seed: rng.next_u64(),
    })
}

/// Hold out rows, fit on the rest, and score the fit against the truth.
pub fn run_replicate(scenario: &SimScenario, replicate: usize) -> Result<ReplicateMetrics> {
    let ReplicateSplit {
        data,
        train,
        holdout,
        info_seed,
        predict_seed,
    } = replicate_split(scenario, replicate)?;

    let pick = |v: &DVector<f64>, rows: &[usize]| DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]));
    let pick_x = |rows: &[usize]| DMatrix::from_fn(rows.len(), 2, |r, c| data.x[(rows[r], c)]);
    let pick_u = |rows: &[usize]| -> Vec<Vec<f64>> {
        data.u.iter().map(|col| rows.iter().map(|&i| col[i]).collect()).collect()
    };

    let design = GamDesign::from_covariates(
        scenario.family,
        pick(&data.y, &train),
        pick_x(&train),
        &pick_u(&train),
        BasisSpec::cubic(scenario.knots()),
    )?;
    let start = Instant::now();
    let fit = vafit::fit(&design, &scenario.fit, None)?;
    let fit_seconds = start.elapsed().as_secs_f64();

    let eta_hat = fit.linear_predictor(&design)?;
    let eta_true = pick(&data.eta_true, &train);
    let mu_true = pick(&data.mu_true, &train);
    let m = train.len() as f64;
    let mse_eta = (&eta_hat - &eta_true).norm_squared() / m;
    let mse_mu = eta_hat
        .iter()
        .zip(mu_true.iter())
        .map(|(e, mu)| (scenario.family.inverse_link(*e) - mu).powi(2))
        .sum::<f64>()
        / m;

    let truth = scenario.kappa_true[1];
    let estimate = fit.params.kappa[1];
    let wald = inference::information_at(&fit, &design, scenario.mc_samples, info_seed)
        .and_then(|info| inference::parametric_wald(&fit, &info, scenario.level));
    let (ci_covered_kappa2, ci_width_kappa2, information_error) = match wald {
        Ok(table) => {
            let k2 = &table[1];
            (Some(k2.lower <= truth && truth <= k2.upper), Some(k2.upper - k2.lower), None)
        }
        Err(e @ GamError::Singular { .. }) => (None, None, Some(e.to_string())),
        Err(e) => return Err(e),
    };

    let z_new = model::smooth_design_from_bases(&design.bases, &pick_u(&holdout))?;
    let preds = inference::predict(
        &fit,
        &pick_x(&holdout),
        &z_new,
        scenario.level,
        scenario.predictive_draws,
        predict_seed,
    )?;
    let lower: Vec<f64> = preds.iter().map(|p| p.lower).collect();
    let upper: Vec<f64> = preds.iter().map(|p| p.upper).collect();
    let y_hold: Vec<f64> = holdout.iter().map(|&i| data.y[i]).collect();
    let score = interval_score(&y_hold, &lower, &upper, 1.0 - scenario.level)?;
    let width = lower.iter().zip(&upper).map(|(l, u)| u - l).sum::<f64>() / lower.len().max(1) as f64;

    Ok(ReplicateMetrics {
        replicate,
        mse_eta,
        mse_mu,
        mse_kappa2: (estimate - truth).powi(2),
        bias_kappa2: estimate - truth,
        ci_covered_kappa2,
        ci_width_kappa2,
        information_error,
        interval_score: score,
        interval_width_mean: width,
        fit_seconds,
        converged: fit.converged,
        n_iters: fit.n_iters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation; 0 for a single replicate.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: SimScenario,
    pub knots: usize,
    pub n_completed: usize,
    pub n_failed: usize,
    pub n_converged: usize,
    /// Replicates whose information matrix gave a Wald interval for `kappa_2`.
    pub n_ci_available: usize,
    /// Coverage over the replicates with an interval.
    pub ci_coverage_kappa2: f64,
    pub metrics: Vec<MetricSummary>,
    pub failures: Vec<ReplicateFailure>,
}

impl ScenarioSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn convergence_rate(&self) -> f64 {
        self.n_converged as f64 / self.scenario.n_replicates as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub summary: ScenarioSummary,
    pub replicates: Vec<ReplicateMetrics>,
}

fn summarize(name: &str, values: &[f64]) -> MetricSummary {
    let k = values.len();
    if k == 0 {
        return MetricSummary {
            metric: name.into(),
            mean: f64::NAN,
            median: f64::NAN,
            sd: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    let sd = if k > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    MetricSummary {
        metric: name.into(),
        mean,
        median,
        sd,
    }
}

/// Run every replicate (in parallel) and aggregate. Replicate errors are
/// recorded, not raised.
pub fn run_scenario(scenario: &SimScenario) -> Result<ScenarioRun> {
    scenario.validate()?;
    let outcomes: Vec<Result<ReplicateMetrics>> = (0..scenario.n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(scenario, r))
        .collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(m) => replicates.push(m),
            Err(e) => failures.push(ReplicateFailure {
                replicate: r,
                message: e.to_string(),
            }),
        }
    }
    let column = |f: fn(&ReplicateMetrics) -> f64| replicates.iter().map(f).collect::<Vec<f64>>();
    let metrics = vec![
        summarize("mse_eta", &column(|m| m.mse_eta)),
        summarize("mse_mu", &column(|m| m.mse_mu)),
        summarize("mse_kappa2", &column(|m| m.mse_kappa2)),
        summarize("bias_kappa2", &column(|m| m.bias_kappa2)),
        summarize(
            "ci_width_kappa2",
            &replicates.iter().filter_map(|m| m.ci_width_kappa2).collect::<Vec<_>>(),
        ),
        summarize("interval_score", &column(|m| m.interval_score)),
        summarize("interval_width_mean", &column(|m| m.interval_width_mean)),
    ];
    let intervals: Vec<bool> = replicates.iter().filter_map(|m| m.ci_covered_kappa2).collect();
    let covered = intervals.iter().filter(|c| **c).count();
    let summary = ScenarioSummary {
        scenario: scenario.clone(),
        knots: scenario.knots(),
        n_completed: replicates.len(),
        n_failed: failures.len(),
        n_converged: replicates.iter().filter(|m| m.converged).count(),
        n_ci_available: intervals.len(),
        ci_coverage_kappa2: if intervals.is_empty() {
            f64::NAN
        } else {
            covered as f64 / intervals.len() as f64
        },
        metrics,
        failures,
    };
    Ok(ScenarioRun { summary, replicates })
}

fn csv_error(e: csv::Error) -> GamError {
    GamError::InvalidArgument(format!("csv output failed: {e}"))
}

/// Aggregated table: one row per metric plus a coverage row.
pub fn write_summary_csv<W: Write>(summary: &ScenarioSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in &summary.metrics {
        w.serialize(m).map_err(csv_error)?;
    }
    w.serialize(MetricSummary {
        metric: "ci_coverage_kappa2".into(),
        mean: summary.ci_coverage_kappa2,
        median: summary.ci_coverage_kappa2,
        sd: 0.0,
    })
    .map_err(csv_error)?;
    w.flush().map_err(|e| GamError::InvalidArgument(e.to_string()))
}

pub fn write_summary_json<W: Write>(summary: &ScenarioSummary, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, summary).map_err(|e| GamError::InvalidArgument(format!("json output failed: {e}")))
}

/// Per-replicate metrics, one row each.
pub fn write_replicates_csv<W: Write>(replicates: &[ReplicateMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in replicates {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush().map_err(|e| GamError::InvalidArgument(e.to_string()))
}

#[cfg(test)]
mod tests;
