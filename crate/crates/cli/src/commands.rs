//! The `fit`, `predict` and `simulate` subcommands.

use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use vagam::inference::{self, DEFAULT_MC_SAMPLES, PREDICTIVE_DRAWS};
use vagam::{model, simstudy, BasisSpec, Family, FitSettings, GamDesign, SimScenario};

use crate::data::Table;
use crate::error::{CliError, CliResult};
use crate::report::{FitReport, ModelSpec, ParametricRow, SmoothRow, INTERCEPT, REPORT_VERSION};

/// Points on each curve grid.
pub const CURVE_POINTS: usize = 200;
/// Realizations behind each simultaneous band.
pub const BAND_DRAWS: usize = 10_000;

pub struct FitArgs {
    pub data: PathBuf,
    pub response: String,
    pub family: Family,
    pub parametric: Vec<String>,
    pub smooth: Vec<String>,
    pub knots: Option<usize>,
    pub level: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub max_iters: usize,
    pub tol: f64,
}

pub struct PredictArgs {
    pub report: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub level: Option<f64>,
    pub seed: u64,
}

pub struct SimulateArgs {
    pub family: Family,
    pub n: usize,
    pub reps: usize,
    pub holdout: usize,
    pub knots: Option<usize>,
    pub level: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub max_iters: usize,
    pub tol: f64,
}

fn check_level(level: f64) -> CliResult<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::Data(format!("--level must lie in (0, 1), got {level}")))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Parametric design with a leading intercept column.
fn parametric_design(table: &Table, columns: &[String]) -> DMatrix<f64> {
    DMatrix::from_fn(table.n_rows, columns.len() + 1, |i, k| {
        if k == 0 {
            1.0
        } else {
            table.column(&columns[k - 1])[i]
        }
    })
}

fn smooth_columns(table: &Table, columns: &[String]) -> Vec<Vec<f64>> {
    columns.iter().map(|c| table.column(c).to_vec()).collect()
}

/// Curve file name with characters outside `[A-Za-z0-9_-]` replaced.
pub fn curve_file_name(covariate: &str) -> String {
    let clean: String = covariate
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("curve_{clean}.csv")
}

fn fit_settings(max_iters: usize, tol: f64, seed: u64) -> CliResult<FitSettings> {
    let settings = FitSettings {
        max_outer_iters: max_iters,
        tol_lowerbound: tol,
        tol_params: tol,
        seed,
        ..Default::default()
    };
    settings.validate().map_err(CliError::data)?;
    Ok(settings)
}

pub fn fit(args: &FitArgs) -> CliResult<FitReport> {
    check_level(args.level)?;
    if args.smooth.is_empty() {
        return Err(CliError::Data("at least one --smooth column is required".into()));
    }
    let mut seen = HashSet::new();
    for name in std::iter::once(&args.response).chain(&args.parametric).chain(&args.smooth) {
        if !seen.insert(name.as_str()) {
            return Err(CliError::Data(format!("column '{name}' is named more than once")));
        }
    }
    let settings = fit_settings(args.max_iters, args.tol, args.seed)?;
    let names: Vec<&str> = seen.into_iter().collect();
    let table = Table::read(&args.data, &names)?;
    let knots = args.knots.unwrap_or_else(|| vagam::knot_count_rule(table.n_rows));
    let design = GamDesign::from_covariates(
        args.family,
        DVector::from_column_slice(table.column(&args.response)),
        parametric_design(&table, &args.parametric),
        &smooth_columns(&table, &args.smooth),
        BasisSpec::cubic(knots),
    )
    .map_err(|e| CliError::Data(format!("{}: {e}", args.data.display())))?;

    let fit = vagam::fit(&design, &settings, None)?;
    let mut warnings = Vec::new();
    let mut labels = vec![INTERCEPT.to_string()];
    labels.extend(args.parametric.iter().cloned());

    let wald = if fit.converged {
        inference::louis_information(&fit, &design, DEFAULT_MC_SAMPLES, args.seed)
            .and_then(|info| {
                warnings.extend(info.warnings.iter().cloned());
                inference::parametric_wald(&fit, &info, args.level)
            })
            .map_err(|e| warnings.push(format!("parametric inference unavailable: {e}")))
            .ok()
    } else {
        warnings.push("parametric inference skipped: the fit did not converge".into());
        None
    };
    let parametric = labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            let row = wald.as_ref().map(|t| &t[k]);
            ParametricRow {
                label: label.clone(),
                estimate: fit.params.kappa[k],
                std_error: row.map(|r| r.std_error),
                lower: row.map(|r| r.lower),
                upper: row.map(|r| r.upper),
                z_value: row.map(|r| r.z_value),
                p_value: row.map(|r| r.p_value),
            }
        })
        .collect();

    let mut smoothing = Vec::with_capacity(args.smooth.len());
    for (j, name) in args.smooth.iter().enumerate() {
        let test = inference::smooth_wald_test(&fit, &design, j)
            .map_err(|e| warnings.push(format!("Wald test for '{name}' unavailable: {e}")))
            .ok();
        smoothing.push(SmoothRow {
            covariate: name.clone(),
            lambda: fit.params.lambda[j],
            lambda_capped: fit.diagnostics.lambda_capped.get(j).copied().unwrap_or(false),
            wald_stat: test.as_ref().map(|t| t.wald_stat),
            dof: design.bases[j].basis_dim,
            p_value: test.as_ref().map(|t| t.p_value),
        });
    }

    create_dir(&args.out)?;
    for (j, name) in args.smooth.iter().enumerate() {
        write_curve(&fit, &design, j, args.level, args.seed.wrapping_add(1 + j as u64), &args.out.join(curve_file_name(name)))?;
    }

    let report = FitReport {
        version: REPORT_VERSION,
        model: ModelSpec {
            family: args.family,
            response: args.response.clone(),
            parametric: args.parametric.clone(),
            smooth: args.smooth.clone(),
            knots,
            level: args.level,
            seed: args.seed,
            max_iters: args.max_iters,
            tol: args.tol,
            n: design.n(),
        },
        converged: fit.converged,
        n_iters: fit.n_iters,
        lower_bound: fit.lower_bound(),
        parametric,
        smoothing,
        lower_bound_trace: fit.lower_bound_trace.clone(),
        diagnostics: fit.diagnostics.clone(),
        warnings,
        bases: design.bases.clone(),
        params: fit.params.clone(),
        vparams: fit.vparams.clone(),
        fitted_eta: fit.linear_predictor(&design)?.iter().copied().collect(),
    };
    report.write(&args.out.join("report.json"))?;
    if !fit.converged {
        return Err(CliError::NotConverged(format!(
            "no convergence after {} iterations; report written to {}",
            fit.n_iters,
            args.out.display()
        )));
    }
    Ok(report)
}

fn write_curve(fit: &vagam::FitResult, design: &GamDesign, j: usize, level: f64, seed: u64, path: &Path) -> CliResult<()> {
    let (lo, hi) = design.bases[j].covariate_range;
    let grid: Vec<f64> = (0..CURVE_POINTS)
        .map(|l| lo + (hi - lo) * l as f64 / (CURVE_POINTS - 1) as f64)
        .collect();
    let pointwise = inference::pointwise_band(fit, design, j, &grid, level)?;
    let simultaneous = inference::simultaneous_band(fit, design, j, &grid, level, BAND_DRAWS, seed)?;
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let csv_err = |e: csv::Error| CliError::io(path, e);
    w.write_record([
        "grid",
        "center",
        "pointwise_lower",
        "pointwise_upper",
        "simultaneous_lower",
        "simultaneous_upper",
    ])
    .map_err(csv_err)?;
    for l in 0..grid.len() {
        w.write_record(
            [
                grid[l],
                pointwise.center[l],
                pointwise.lower[l],
                pointwise.upper[l],
                simultaneous.lower[l],
                simultaneous.upper[l],
            ]
            .map(|v| v.to_string()),
        )
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn predict(args: &PredictArgs) -> CliResult<usize> {
    let report = FitReport::read(&args.report)?;
    let level = args.level.unwrap_or(report.model.level);
    check_level(level)?;
    let spec = &report.model;
    let names: Vec<&str> = spec.parametric.iter().chain(&spec.smooth).map(String::as_str).collect();
    let table = Table::read(&args.data, &names)?;
    let x = parametric_design(&table, &spec.parametric);
    let z = model::smooth_design_from_bases(&report.bases, &smooth_columns(&table, &spec.smooth))
        .map_err(|e| CliError::Data(format!("{}: {e}", args.data.display())))?;
    let fit = report.fit_result();
    let predictions = if table.n_rows == 0 {
        Vec::new()
    } else {
        inference::predict(&fit, &x, &z, level, PREDICTIVE_DRAWS, args.seed)?
    };

    create_dir(&args.out)?;
    let path = args.out.join("predictions.csv");
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    let csv_err = |e: csv::Error| CliError::io(&path, e);
    w.write_record(["eta", "mu", "lower", "upper"]).map_err(csv_err)?;
    for p in &predictions {
        w.write_record([p.eta, p.mu, p.lower, p.upper].map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(predictions.len())
}

pub fn simulate(args: &SimulateArgs) -> CliResult<SimScenario> {
    check_level(args.level)?;
    let mut scenario = SimScenario::new(args.family, args.n, args.reps, args.seed);
    scenario.n_holdout = args.holdout;
    scenario.num_knots = args.knots;
    scenario.level = args.level;
    scenario.fit = fit_settings(args.max_iters, args.tol, args.seed)?;
    scenario.validate().map_err(CliError::data)?;

    let run = simstudy::run_scenario(&scenario)?;
    create_dir(&args.out)?;
    let summary_csv = args.out.join("summary.csv");
    simstudy::write_summary_csv(&run.summary, create_file(&summary_csv)?)?;
    let summary_json = args.out.join("summary.json");
    simstudy::write_summary_json(&run.summary, create_file(&summary_json)?)?;
    let replicates = args.out.join("replicates.csv");
    simstudy::write_replicates_csv(&run.replicates, create_file(&replicates)?)?;
    Ok(scenario)
}
