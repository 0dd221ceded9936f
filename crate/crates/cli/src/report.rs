//! The JSON fit report and the state needed to predict from it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vagam::vafit::FitDiagnostics;
use vagam::{Family, FitResult, ModelParams, SmoothBasis, VariationalParams};

use crate::error::{CliError, CliResult};

pub const REPORT_VERSION: u32 = 1;

/// Label of the intercept column added to every parametric design.
pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub response: String,
    /// Parametric columns after the intercept.
    pub parametric: Vec<String>,
    pub smooth: Vec<String>,
    pub knots: usize,
    pub level: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub n: usize,
}

/// One row of the parametric table. Inference fields are absent when the
/// information matrix could not be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricRow {
    pub label: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub z_value: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothRow {
    pub covariate: String,
    pub lambda: f64,
    pub lambda_capped: bool,
    pub wald_stat: Option<f64>,
    pub dof: usize,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: u32,
    pub model: ModelSpec,
    pub converged: bool,
    pub n_iters: usize,
    pub lower_bound: f64,
    pub parametric: Vec<ParametricRow>,
    pub smoothing: Vec<SmoothRow>,
    pub lower_bound_trace: Vec<f64>,
    pub diagnostics: FitDiagnostics,
    pub warnings: Vec<String>,
    pub bases: Vec<SmoothBasis>,
    pub params: ModelParams,
    /// Mean and lower Cholesky factor of the variational covariance.
    pub vparams: VariationalParams,
    pub fitted_eta: Vec<f64>,
}

impl FitReport {
    pub fn fit_result(&self) -> FitResult {
        FitResult {
            params: self.params.clone(),
            vparams: self.vparams.clone(),
            lower_bound_trace: self.lower_bound_trace.clone(),
            converged: self.converged,
            n_iters: self.n_iters,
            family: self.model.family,
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::io(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    /// Loads a report, rejecting other format versions before decoding the rest.
    pub fn read(path: &Path) -> CliResult<FitReport> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: not a JSON report: {e}", path.display())))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(REPORT_VERSION) => {}
            Some(v) => {
                return Err(CliError::Data(format!(
                    "{}: report version {v} is not supported (expected {REPORT_VERSION})",
                    path.display()
                )))
            }
            None => return Err(CliError::Data(format!("{}: report has no version field", path.display()))),
        }
        serde_json::from_value(value).map_err(|e| CliError::Data(format!("{}: malformed report: {e}", path.display())))
    }
}
