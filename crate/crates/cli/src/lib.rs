//! Run the synthetic control pipeline from a configuration file and write
//! the results bundle: `results.json`, `intervals.csv`, `summary.txt` and
//! `plotspec.json`.

pub mod config;
pub mod format;
pub mod plotspec;
pub mod report;

use std::fs::File;

use serde::Serialize;
use thiserror::Error;

use scpi_core::constraints::{ConstraintSpec, LowerBound};
use scpi_core::estimator::{self, DfRule, EstimatorError, Tuning};
use scpi_core::panel::{self, MissingReport, PanelError, ScMatrices};
use scpi_core::solver::{KktResiduals, SolveStatus, SolverError};
use scpi_core::uncertainty::{self, PeriodInterval, Sensitivity, UncertaintyError};

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Panel(#[from] PanelError),
    #[error("estimation failed for constraint `{constraint}`: {source}")]
    Estimator {
        constraint: String,
        source: EstimatorError,
    },
    #[error("uncertainty quantification failed for constraint `{constraint}`: {source}")]
    Uncertainty {
        constraint: String,
        source: UncertaintyError,
    },
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    /// 2 for anything the user can fix in the inputs, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Panel(_) | CliError::Output(_) => 2,
            CliError::Estimator { source, .. } => match source {
                EstimatorError::Constraint(_) => 2,
                EstimatorError::Solver(_) | EstimatorError::DegenerateOls { .. } => 3,
            },
            CliError::Uncertainty { source, .. } => match source {
                UncertaintyError::Config(_) | UncertaintyError::MissingBounds { .. } => 2,
                UncertaintyError::Solver(SolverError::Dimension(_)) => 2,
                _ => 3,
            },
        }
    }
}

/// Donor weight or covariate coefficient with its label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Named {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub weights: Vec<Named>,
    pub covariates: Vec<Named>,
    pub active_donors: Vec<String>,
    pub df_hat: f64,
    pub df_rule: DfRule,
    pub q: Option<f64>,
    pub q2: Option<f64>,
    pub objective: f64,
    pub ridge_lambda: Option<f64>,
    pub tuning: Option<Tuning>,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    /// Synthetic outcome over the retained pre periods.
    pub synthetic_pre: Vec<f64>,
}

/// Resolved settings and diagnostics of the interval construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintySummary {
    pub rho: f64,
    pub rho_j: Vec<f64>,
    pub binding: Vec<usize>,
    pub sigma_min_eig_ratio: f64,
    pub coverage: f64,
    pub failed_draws: Option<usize>,
    pub unbounded: Option<usize>,
    pub eps: Option<Vec<f64>>,
    pub out_of_sample_mean: Vec<Option<f64>>,
    pub out_of_sample_sigma: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintResult {
    pub label: String,
    pub spec: ConstraintSpec,
    pub fit: FitSummary,
    pub uncertainty: UncertaintySummary,
    pub intervals: Vec<PeriodInterval>,
    pub joint: Option<Vec<PeriodInterval>>,
    pub sensitivity: Option<Sensitivity>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub treated: String,
    pub donors: Vec<String>,
    pub features: Vec<String>,
    pub outcome: String,
    pub time_var: String,
    pub pre_periods: Vec<i64>,
    pub post_periods: Vec<i64>,
    pub y_pre: Vec<f64>,
    pub y_post: Vec<Option<f64>>,
    pub covariates: Vec<String>,
    pub missing: MissingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsBundle {
    pub generated_at: String,
    pub version: String,
    /// The configuration after command-line overrides.
    pub config: RunConfig,
    pub data: DataSummary,
    pub results: Vec<ConstraintResult>,
}

/// Load and validate the panel, then build the stacked system.
pub fn prepare(cfg: &RunConfig) -> Result<(ScMatrices, MissingReport), CliError> {
    let file = File::open(&cfg.data.path)
        .map_err(|e| CliError::Config(format!("cannot open data file {}: {e}", cfg.data.path.display())))?;
    let raw = panel::load_panel(file, &cfg.schema())?;
    let (clean, report) = panel::apply_missing_rules(raw)?;
    let m = panel::build_matrices(&clean, &cfg.matrix_options())?;
    Ok((m, report))
}

fn label(spec: &ConstraintSpec) -> String {
    match (spec.name, spec.lb) {
        (Some(p), _) => p.as_str().to_string(),
        (None, LowerBound::Zero) => format!("custom-{:?}-nonneg", spec.p),
        (None, LowerBound::NegInf) => format!("custom-{:?}", spec.p),
    }
}

/// Fit one constraint set and build its intervals.
pub fn run_constraint(m: &ScMatrices, spec: &ConstraintSpec, cfg: &RunConfig) -> Result<ConstraintResult, CliError> {
    let name = label(spec);
    let fit = estimator::fit(m, spec).map_err(|source| CliError::Estimator {
        constraint: name.clone(),
        source,
    })?;
    let unc = uncertainty::prediction_intervals(m, &fit, &cfg.uncertainty).map_err(|source| CliError::Uncertainty {
        constraint: name.clone(),
        source,
    })?;
    let synthetic_pre = (&m.p_pre * &fit.beta_hat).iter().copied().collect();
    let mut warnings = fit.warnings.clone();
    warnings.extend(unc.warnings.iter().cloned());
    Ok(ConstraintResult {
        label: name,
        spec: fit.spec,
        fit: FitSummary {
            weights: m
                .donors
                .iter()
                .zip(fit.w_hat.iter())
                .map(|(n, v)| Named { name: n.clone(), value: *v })
                .collect(),
            covariates: m
                .c_names
                .iter()
                .zip(fit.r_hat.iter())
                .map(|(n, v)| Named { name: n.clone(), value: *v })
                .collect(),
            active_donors: fit.active_set.iter().map(|&k| m.donors[k].clone()).collect(),
            df_hat: fit.df_hat,
            df_rule: fit.df_rule,
            q: fit.q_used,
            q2: fit.q2_used,
            objective: fit.objective,
            ridge_lambda: fit.ridge_lambda,
            tuning: fit.tuning.clone(),
            status: fit.status,
            kkt: fit.kkt,
            synthetic_pre,
        },
        uncertainty: UncertaintySummary {
            rho: unc.model.rho,
            rho_j: unc.model.delta_star.rho_j.clone(),
            binding: unc.model.delta_star.binding.clone(),
            sigma_min_eig_ratio: unc.model.sigma_min_eig_ratio,
            coverage: unc.coverage,
            failed_draws: unc.in_sample.as_ref().map(|b| b.failed_draws),
            unbounded: unc.in_sample.as_ref().map(|b| b.unbounded),
            eps: unc.eps.clone(),
            out_of_sample_mean: unc.out_of_sample.mean.clone(),
            out_of_sample_sigma: unc.out_of_sample.sigma.clone(),
        },
        intervals: unc.intervals,
        joint: unc.joint,
        sensitivity: unc.sensitivity,
        warnings,
    })
}

/// Run every configured constraint set. Validation happens before any data
/// is read.
pub fn run(cfg: &RunConfig) -> Result<ResultsBundle, CliError> {
    let specs = cfg.validate()?;
    let (m, missing) = prepare(cfg)?;
    cfg.uncertainty
        .validate(m.t0 * m.m, m.t1)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let results = specs
        .iter()
        .map(|s| run_constraint(&m, s, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ResultsBundle {
        generated_at: humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        data: DataSummary {
            treated: m.treated.clone(),
            donors: m.donors.clone(),
            features: m.features.clone(),
            outcome: m.outcome.clone(),
            time_var: cfg.data.time_var.clone(),
            pre_periods: m.pre_periods.clone(),
            post_periods: m.post_periods.clone(),
            y_pre: m.y_pre.iter().copied().collect(),
            y_post: m.y_post.clone(),
            covariates: m.c_names.clone(),
            missing,
        },
        results,
    })
}
