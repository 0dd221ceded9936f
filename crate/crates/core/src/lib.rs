//! Generalized additive models estimated by maximizing a variational lower
//! bound on the mixed-model marginal likelihood.
//!
//! * [`splines`]: centered P-spline bases and penalties.
//! * [`model`]: families, designs and parameter containers.
//! * [`vafit`]: the lower bound and the coordinate-ascent fit.
//! * [`inference`]: information matrix, Wald tests, bands and prediction.
//! * [`simstudy`]: simulated data sets, replicate runs and summaries.

pub mod error;
pub mod inference;
mod linalg;
pub mod model;
pub mod simstudy;
pub mod splines;
pub mod vafit;

#[cfg(test)]
mod testutil;

pub use error::{GamError, Result};
pub use model::{BasisSpec, CovStructure, Family, GamDesign, ModelParams, VariationalParams};
pub use splines::{build_basis, evaluate_basis, knot_count_rule, CenteredDesignBlock, SmoothBasis};
pub use vafit::{fit, FitResult, FitSettings, LambdaUpdate};
pub use inference::{louis_information, parametric_wald, pointwise_band, predict, simultaneous_band, smooth_wald_test, BandKind, BandResult, InformationMatrix, ParametricEstimate, Prediction, SmoothTestResult};
pub use simstudy::{interval_score, run_scenario, simulate_dataset, ReplicateMetrics, ScenarioRun, ScenarioSummary, SimScenario};
