//! Prediction intervals for the treatment effect: simulated in-sample
//! bounds, out-of-sample bounds, their assembly, simultaneous intervals and
//! sensitivity to the out-of-sample scale.

pub mod delta;
pub mod design;
pub mod insample;
pub mod moments;
pub mod outsample;
pub mod rho;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use delta::{build_delta_star, DeltaStar};
pub use insample::{in_sample_bounds, InSampleBounds, JointBounds, SimulationSpec};
pub use moments::{estimate_u_moments, ResidualMoments, VarianceCorrection};
pub use outsample::{out_of_sample_bounds, EMethod, GaussianModel, OosData, OutOfSampleBounds};
pub use rho::{compute_rho, rho_formula, RhoConstant};

use crate::estimator::FitResult;
use crate::panel::ScMatrices;
use crate::solver::SolverError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("invalid uncertainty option: {0}")]
    Config(String),
    #[error("donor column {0} has zero sample variance; the rho constant is undefined")]
    ZeroDonorVariance(usize),
    #[error("all {0} simulation draws failed")]
    SimulationFailed(usize),
    #[error("{what} has {got} entries; expected 1 or T1 = {t1}")]
    MissingBounds { what: &'static str, got: usize, t1: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// A user-supplied `(lower, upper)` pair per post period, or one pair for all.
pub type BoundOverride = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub u_missp: bool,
    pub u_order: usize,
    pub u_lags: usize,
    /// Explicit residual design with `T0 M` rows.
    #[serde(skip)]
    pub u_design: Option<DMatrix<f64>>,
    pub u_sigma: VarianceCorrection,
    pub u_alpha: f64,
    pub e_method: EMethod,
    pub e_order: usize,
    pub e_lags: usize,
    /// Explicit out-of-sample design with `T0 + T1` rows (pre, then post).
    #[serde(skip)]
    pub e_design: Option<DMatrix<f64>>,
    pub e_alpha: f64,
    pub sims: usize,
    pub rho: Option<f64>,
    pub rho_constant: RhoConstant,
    pub cores: usize,
    pub seed: u64,
    pub w_bounds: Option<BoundOverride>,
    pub e_bounds: Option<BoundOverride>,
    pub sens_scales: Vec<f64>,
    /// Post period for the sensitivity table; the first available one if unset.
    pub sens_period: Option<i64>,
    pub joint: bool,
    /// Joint horizon `L`; all post periods when unset.
    pub horizon: Option<usize>,
    /// Widen per-period in-sample bounds for ℓ2 constraints as in joint mode.
    pub eps_per_period: bool,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            u_missp: true,
            u_order: 1,
            u_lags: 0,
            u_design: None,
            u_sigma: VarianceCorrection::HC1,
            u_alpha: 0.05,
            e_method: EMethod::Gaussian,
            e_order: 1,
            e_lags: 0,
            e_design: None,
            e_alpha: 0.05,
            sims: 1000,
            rho: None,
            rho_constant: RhoConstant::C1,
            cores: 1,
            seed: 8894,
            w_bounds: None,
            e_bounds: None,
            sens_scales: Vec::new(),
            sens_period: None,
            joint: false,
            horizon: None,
            eps_per_period: false,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self, t0m: usize, t1: usize) -> Result<(), UncertaintyError> {
        let bad = |m: String| Err(UncertaintyError::Config(m));
        for (name, a) in [("u_alpha", self.u_alpha), ("e_alpha", self.e_alpha)] {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {a}"));
            }
        }
        if self.sims < 2 {
            return bad(format!("sims must be at least 2, got {}", self.sims));
        }
        if let Some(l) = self.horizon {
            if l == 0 || l > t1 {
                return bad(format!("horizon must be in 1..={t1}, got {l}"));
            }
        }
        if let Some(r) = self.rho {
            if !(r.is_finite() && r > 0.0) {
                return bad(format!("rho must be positive, got {r}"));
            }
        }
        if self.sens_scales.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return bad("sensitivity scales must be nonnegative".into());
        }
        if let Some(d) = &self.u_design {
            if d.nrows() != t0m {
                return bad(format!("u_design needs T0*M = {t0m} rows, has {}", d.nrows()));
            }
        }
        for (what, o) in [("w_bounds", &self.w_bounds), ("e_bounds", &self.e_bounds)] {
            if let Some(v) = o {
                if v.len() != 1 && v.len() != t1 {
                    return Err(UncertaintyError::MissingBounds { what, got: v.len(), t1 });
                }
            }
        }
        Ok(())
    }

    /// Nominal coverage `1 - alpha1 - alpha2`.
    pub fn coverage(&self) -> f64 {
        1.0 - self.u_alpha - self.e_alpha
    }

    fn joint_horizon(&self, t1: usize) -> Option<usize> {
        self.joint.then(|| self.horizon.unwrap_or(t1))
    }
}

fn expand(o: &BoundOverride, t1: usize) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let at = |k: usize| if o.len() == 1 { o[0] } else { o[k] };
    ((0..t1).map(|k| Some(at(k).0)).collect(), (0..t1).map(|k| Some(at(k).1)).collect())
}

/// Prediction interval for one post period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodInterval {
    pub period: i64,
    pub y1: Option<f64>,
    pub y0_hat: Option<f64>,
    pub tau_hat: Option<f64>,
    pub m1_l: Option<f64>,
    pub m1_u: Option<f64>,
    pub m2_l: Option<f64>,
    pub m2_u: Option<f64>,
    /// Interval for `tau_t`.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Interval for the counterfactual `Y_1t(0)`.
    pub y0_lower: Option<f64>,
    pub y0_upper: Option<f64>,
}

/// Per-period bounds entering [`assemble_intervals`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bounds {
    pub m1_l: Vec<Option<f64>>,
    pub m1_u: Vec<Option<f64>>,
    pub m2_l: Vec<Option<f64>>,
    pub m2_u: Vec<Option<f64>>,
}

/// `[tau_hat + M1_L - M2_U, tau_hat + M1_U - M2_L]` and the matching
/// counterfactual interval, period by period.
pub fn assemble_intervals(m: &ScMatrices, fit: &FitResult, b: &Bounds) -> Vec<PeriodInterval> {
    (0..b.m1_l.len())
        .map(|k| {
            let (m1_l, m1_u, m2_l, m2_u) = (b.m1_l[k], b.m1_u[k], b.m2_l[k], b.m2_u[k]);
            let tau = fit.tau_hat[k];
            let y0 = fit.y0_hat[k];
            let comb = |base: Option<f64>, x: Option<f64>, y: Option<f64>| Some(base? + x? - y?);
            PeriodInterval {
                period: m.post_periods[k],
                y1: m.y_post[k],
                y0_hat: y0,
                tau_hat: tau,
                m1_l,
                m1_u,
                m2_l,
                m2_u,
                lower: comb(tau, m1_l, m2_u),
                upper: comb(tau, m1_u, m2_l),
                y0_lower: comb(y0, m2_l, m1_u),
                y0_upper: comb(y0, m2_u, m1_l),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub scale: f64,
    pub m2_l: f64,
    pub m2_u: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub y0_lower: f64,
    pub y0_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sensitivity {
    pub period: i64,
    pub y1: Option<f64>,
    pub y0_hat: f64,
    pub tau_hat: Option<f64>,
    /// Baseline `sigma_H` that the scales multiply.
    pub sigma: f64,
    pub rows: Vec<SensitivityRow>,
}

/// Re-assemble the interval of one period with the gaussian out-of-sample
/// scale multiplied by each `kappa`.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_analysis(
    period: i64,
    y0_hat: f64,
    y1: Option<f64>,
    m1: (f64, f64),
    mean: f64,
    sigma: f64,
    alpha: f64,
    scales: &[f64],
) -> Sensitivity {
    let hw = outsample::gaussian_halfwidth(sigma * sigma, alpha, 1);
    let tau = y1.map(|y| y - y0_hat);
    let rows = scales
        .iter()
        .map(|&k| {
            let (m2_l, m2_u) = (mean - k * hw, mean + k * hw);
            SensitivityRow {
                scale: k,
                m2_l,
                m2_u,
                lower: tau.map(|t| t + m1.0 - m2_u),
                upper: tau.map(|t| t + m1.1 - m2_l),
                y0_lower: y0_hat + m2_l - m1.1,
                y0_upper: y0_hat + m2_u - m1.0,
            }
        })
        .collect();
    Sensitivity {
        period,
        y1,
        y0_hat,
        tau_hat: tau,
        sigma,
        rows,
    }
}

/// Everything estimated for the in-sample simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InSampleModel {
    pub rho: f64,
    pub delta_star: DeltaStar,
    pub moments: ResidualMoments,
    pub sigma_hat: DMatrix<f64>,
    pub qhat: DMatrix<f64>,
    /// Smallest eigenvalue of `Sigma_hat` relative to its largest.
    pub sigma_min_eig_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyResult {
    pub model: InSampleModel,
    /// `None` when the in-sample bounds were supplied by the user.
    pub in_sample: Option<InSampleBounds>,
    pub out_of_sample: OutOfSampleBounds,
    /// Widening for nonlinear constraints, per post period.
    pub eps: Option<Vec<f64>>,
    pub intervals: Vec<PeriodInterval>,
    pub joint: Option<Vec<PeriodInterval>>,
    pub sensitivity: Option<Sensitivity>,
    pub coverage: f64,
    pub warnings: Vec<String>,
}

/// `||p_t||_1 (2 ||beta_hat||_2)^-1 rho^2` for each available period.
pub fn l2_widening(m: &ScMatrices, beta_hat: &DVector<f64>, rho: f64) -> Vec<f64> {
    let nb = beta_hat.norm();
    (0..m.t1)
        .map(|k| match m.p_row(k) {
            Some(p) if nb > 0.0 => p.lp_norm(1) / (2.0 * nb) * rho * rho,
            _ => 0.0,
        })
        .collect()
}

/// Full uncertainty quantification for a fit.
pub fn prediction_intervals(
    m: &ScMatrices,
    fit: &FitResult,
    cfg: &UncertaintyConfig,
) -> Result<UncertaintyResult, UncertaintyError> {
    cfg.validate(m.t0 * m.m, m.t1)?;
    let mut warnings = Vec::new();
    let rho = compute_rho(m, fit, cfg.rho_constant, m.cointegrated, cfg.rho)?;
    let delta_star = build_delta_star(&fit.system, &fit.beta_hat, rho);
    let moments = estimate_u_moments(m, fit, cfg, rho, &mut warnings);
    let (sigma_hat, qhat) = moments::score_moments(m, &moments.v_u);
    let eig = SymmetricEigen::new(sigma_hat.clone()).eigenvalues;
    let top = eig.max();
    let sigma_min_eig_ratio = if top > 0.0 { eig.min() / top } else { 0.0 };
    let horizon = cfg.joint_horizon(m.t1);
    let eps = fit.system.has_l2().then(|| l2_widening(m, &fit.beta_hat, rho));

    let p_rows: Vec<Option<DVector<f64>>> = (0..m.t1).map(|k| m.p_row(k)).collect();
    let in_sample = match &cfg.w_bounds {
        Some(_) => None,
        None => {
            let spec = SimulationSpec {
                p_rows: &p_rows,
                sims: cfg.sims,
                alpha: cfg.u_alpha,
                seed: cfg.seed,
                cores: cfg.cores,
                joint_horizon: horizon,
                eps: eps.clone(),
                eps_per_period: cfg.eps_per_period,
            };
            let b = in_sample_bounds(&qhat, &sigma_hat, &delta_star.system, &spec)?;
            if b.failed_draws > 0 {
                warnings.push(format!("{} of {} simulation draws failed and were dropped", b.failed_draws, cfg.sims));
            }
            if b.unbounded > 0 {
                warnings.push(format!("{} simulated subproblems were unbounded; bounds are infinite", b.unbounded));
            }
            Some(b)
        }
    };

    let data = outsample::oos_data(m, fit, &moments.donors, cfg)?;
    let oos = out_of_sample_bounds(&data, cfg.e_method, cfg.e_alpha, horizon, &mut warnings);

    let (m1_l, m1_u) = match (&cfg.w_bounds, &in_sample) {
        (Some(o), _) => expand(o, m.t1),
        (None, Some(b)) => (b.lower.clone(), b.upper.clone()),
        (None, None) => unreachable!("bounds are simulated when not overridden"),
    };
    let (m2_l, m2_u) = match &cfg.e_bounds {
        Some(o) => expand(o, m.t1),
        None => (oos.lower.clone(), oos.upper.clone()),
    };
    let intervals = assemble_intervals(
        m,
        fit,
        &Bounds {
            m1_l: m1_l.clone(),
            m1_u: m1_u.clone(),
            m2_l: m2_l.clone(),
            m2_u: m2_u.clone(),
        },
    );

    let joint = horizon.map(|h| {
        let (jl, ju): (Vec<Option<f64>>, Vec<Option<f64>>) = match (&cfg.w_bounds, &in_sample) {
            (Some(_), _) => (m1_l[..h].to_vec(), m1_u[..h].to_vec()),
            (None, Some(b)) => match &b.joint {
                Some(j) => (j.lower.iter().map(|x| Some(*x)).collect(), j.upper.iter().map(|x| Some(*x)).collect()),
                None => (vec![None; h], vec![None; h]),
            },
            (None, None) => unreachable!(),
        };
        // unavailable periods stay null in the joint table too
        let avail = |k: usize, x: Option<f64>| if m.p_rows[k].is_some() { x } else { None };
        let (el, eu) = match &cfg.e_bounds {
            Some(_) => (m2_l[..h].to_vec(), m2_u[..h].to_vec()),
            None => oos.joint.clone().expect("joint horizon was requested"),
        };
        let mut iv = assemble_intervals(
            m,
            fit,
            &Bounds {
                m1_l: (0..h).map(|k| avail(k, jl[k])).collect(),
                m1_u: (0..h).map(|k| avail(k, ju[k])).collect(),
                m2_l: el,
                m2_u: eu,
            },
        );
        iv.truncate(h);
        iv
    });

    let sensitivity = if cfg.sens_scales.is_empty() {
        None
    } else {
        let k = match cfg.sens_period {
            Some(t) => m.post_periods.iter().position(|p| *p == t).ok_or_else(|| {
                UncertaintyError::Config(format!("sensitivity period {t} is not a post period"))
            })?,
            None => (0..m.t1)
                .find(|&k| m.p_rows[k].is_some())
                .ok_or_else(|| UncertaintyError::Config("no available post period".into()))?,
        };
        match (fit.y0_hat[k], m1_l[k], m1_u[k], oos.mean[k], oos.sigma[k]) {
            (Some(y0), Some(l), Some(u), Some(mu), Some(sd)) => Some(sensitivity_analysis(
                m.post_periods[k],
                y0,
                m.y_post[k],
                (l, u),
                mu,
                sd,
                cfg.e_alpha,
                &cfg.sens_scales,
            )),
            _ => {
                warnings.push(format!(
                    "sensitivity period {} is unavailable; table skipped",
                    m.post_periods[k]
                ));
                None
            }
        }
    };

    Ok(UncertaintyResult {
        model: InSampleModel {
            rho,
            delta_star,
            moments,
            sigma_hat,
            qhat,
            sigma_min_eig_ratio,
        },
        in_sample,
        out_of_sample: oos,
        eps,
        intervals,
        joint,
        sensitivity,
        coverage: cfg.coverage(),
        warnings,
    })
}
