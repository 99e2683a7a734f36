//! Point prediction: the constrained fit, counterfactual prediction,
//! tuning rules of thumb and effective degrees of freedom.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::constraints::{
    ConstraintError, ConstraintSpec, ConstraintSystem, Direction, LowerBound, Norm, Preset,
    ZERO_WEIGHT_TOL,
};
use crate::linalg;
use crate::panel::ScMatrices;
use crate::solver::{self, KktResiduals, SolveStatus, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("least-squares weights for feature `{feature}` are all zero; the ridge rule is undefined")]
    DegenerateOls { feature: String },
}

/// Which degrees-of-freedom formula applies to a constraint set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DfRule {
    Ols,
    Lasso,
    Simplex,
    Ridge,
}

impl DfRule {
    pub fn for_spec(spec: &ConstraintSpec) -> Self {
        match (spec.p, spec.dir) {
            (Norm::None, _) if spec.lb == LowerBound::NegInf => DfRule::Ols,
            // nonnegative least squares behaves like the lasso count
            (Norm::None, _) => DfRule::Lasso,
            (Norm::L1, Some(Direction::Eq)) | (Norm::L1L2, _) => DfRule::Simplex,
            (Norm::L1, _) => DfRule::Lasso,
            (Norm::L2, _) => DfRule::Ridge,
        }
    }
}

/// Ridge rule-of-thumb details for one feature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RidgeRule {
    pub feature: String,
    pub q: f64,
    pub lambda: f64,
    pub sigma2: f64,
    pub w_ols_norm: f64,
    /// Donors entering the least-squares step (after lasso screening if `J` is large).
    pub donors_used: usize,
}

/// Tuning values filled in by [`resolve_tuning`].
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Tuning {
    pub q: Option<f64>,
    pub q2: Option<f64>,
    pub ridge: Vec<RidgeRule>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    /// The constraint set with tuning values filled in.
    pub spec: ConstraintSpec,
    #[serde(skip)]
    pub system: ConstraintSystem,
    pub w_hat: DVector<f64>,
    pub r_hat: DVector<f64>,
    pub beta_hat: DVector<f64>,
    pub u_hat: DVector<f64>,
    pub a_hat: DVector<f64>,
    /// `p_t' beta` per declared post period; `None` where `p_t` is unavailable.
    pub y0_hat: Vec<Option<f64>>,
    /// `Y_1t(1) - Y0_hat_t`; `None` where either side is unavailable.
    pub tau_hat: Vec<Option<f64>>,
    pub df_hat: f64,
    pub df_rule: DfRule,
    pub q_used: Option<f64>,
    pub q2_used: Option<f64>,
    pub active_set: Vec<usize>,
    pub objective: f64,
    /// Lagrange multiplier of the ℓ2 constraint, for ridge fits.
    pub ridge_lambda: Option<f64>,
    pub tuning: Option<Tuning>,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub warnings: Vec<String>,
}

fn block_rows(m: &ScMatrices, l: usize) -> std::ops::Range<usize> {
    l * m.t0..(l + 1) * m.t0
}

/// Columns of `C` that are not identically zero on feature block `l`.
fn block_c_columns(m: &ScMatrices, l: usize) -> Vec<usize> {
    let rows = block_rows(m, l);
    (0..m.kc())
        .filter(|&k| rows.clone().any(|i| m.c[(i, k)] != 0.0))
        .collect()
}

struct Block {
    a: DVector<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    v: DVector<f64>,
}

fn block(m: &ScMatrices, l: usize) -> Block {
    let rows = block_rows(m, l);
    let c_cols = block_c_columns(m, l);
    let c = DMatrix::from_fn(m.t0, c_cols.len(), |i, k| m.c[(rows.start + i, c_cols[k])]);
    Block {
        a: m.a.rows(rows.start, m.t0).into_owned(),
        b: m.b.rows(rows.start, m.t0).into_owned(),
        c,
        v: m.v.rows(rows.start, m.t0).into_owned(),
    }
}

/// Ridge rule of thumb on one feature block.
fn ridge_rule(m: &ScMatrices, l: usize, warnings: &mut Vec<String>) -> Result<RidgeRule, EstimatorError> {
    let blk = block(m, l);
    let (t0, j, kl) = (m.t0, m.j, blk.c.ncols());
    let feature = m.features[l].clone();

    let donors: Vec<usize> = if j + kl > t0 {
        let lasso = ConstraintSpec {
            q: Some(1.0),
            ..ConstraintSpec::preset(Preset::Lasso)
        }
        .materialize(j, kl)?;
        let sol = solver::solve_wls(&blk.a, &blk.b, &blk.c, &blk.v, &lasso)?;
        let sel: Vec<usize> = (0..j).filter(|&k| sol.x[k].abs() > ZERO_WEIGHT_TOL).collect();
        warnings.push(format!(
            "feature `{feature}`: J + K = {} exceeds T0 = {t0}; ridge rule uses the {} donors selected by lasso",
            j + kl,
            sel.len()
        ));
        sel
    } else {
        (0..j).collect()
    };
    let js = donors.len();
    let bs = linalg::select_columns(&blk.b, &donors);
    let x = linalg::hstack(t0, &[&bs, &blk.c]);
    let ls = linalg::lstsq(&x, &blk.a, Some(&blk.v));
    let w_ols = ls.coef.rows(0, js).into_owned();
    let rss: f64 = (&blk.a - &ls.fitted)
        .iter()
        .zip(blk.v.iter())
        .map(|(e, v)| v * e * e)
        .sum();
    let dof = t0 as i64 - (js + kl) as i64;
    let sigma2 = if dof > 0 {
        rss / dof as f64
    } else {
        warnings.push(format!(
            "feature `{feature}`: no residual degrees of freedom; σ² uses denominator T0"
        ));
        rss / t0 as f64
    };
    let norm2 = w_ols.norm_squared();
    if norm2 == 0.0 {
        return Err(EstimatorError::DegenerateOls { feature });
    }
    let lambda = js as f64 * sigma2 / norm2;
    Ok(RidgeRule {
        feature,
        q: norm2.sqrt() / (1.0 + lambda),
        lambda,
        sigma2,
        w_ols_norm: norm2.sqrt(),
        donors_used: js,
    })
}

/// Fill unset tuning values: `Q = 1` for the ℓ1 part, the ridge rule of
/// thumb (tightest over features) for the ℓ2 part.
pub fn resolve_tuning(m: &ScMatrices, spec: &ConstraintSpec) -> Result<Tuning, EstimatorError> {
    let mut t = Tuning {
        q: spec.q,
        q2: spec.q2,
        ..Default::default()
    };
    let ridge_q = |t: &mut Tuning| -> Result<f64, EstimatorError> {
        let mut rules = Vec::with_capacity(m.m);
        for l in 0..m.m {
            rules.push(ridge_rule(m, l, &mut t.warnings)?);
        }
        let q = rules.iter().map(|r| r.q).fold(f64::INFINITY, f64::min);
        t.ridge = rules;
        Ok(q)
    };
    match spec.p {
        Norm::None => {}
        Norm::L1 => {
            t.q.get_or_insert(1.0);
        }
        Norm::L2 => {
            if t.q.is_none() {
                t.q = Some(ridge_q(&mut t)?);
            }
        }
        Norm::L1L2 => {
            let q = *t.q.get_or_insert(1.0);
            if t.q2.is_none() {
                // below q / sqrt(J) the ball misses the simplex entirely
                let floor = q / (m.j as f64).sqrt();
                let rule = ridge_q(&mut t)?;
                if rule < floor {
                    t.warnings.push(format!(
                        "ridge rule Q2 = {rule:.6} is below the smallest feasible value {floor:.6}; using uniform weights"
                    ));
                }
                t.q2 = Some(rule.max(floor));
            }
        }
    }
    Ok(t)
}

/// Multiplier of the ℓ2 constraint recovered from `lambda w = B'V u`.
/// Returns `None` when the constraint is slack.
pub fn ridge_lambda(m: &ScMatrices, w: &DVector<f64>, u: &DVector<f64>, q: f64) -> Option<f64> {
    let nw = w.norm();
    if nw < q * (1.0 - 1e-6) || nw == 0.0 {
        return None;
    }
    let bvu = m.b.transpose() * u.component_mul(&m.v);
    Some(w.dot(&bvu) / w.norm_squared())
}

/// Effective degrees of freedom of a fit.
pub fn estimate_df(
    rule: DfRule,
    w: &DVector<f64>,
    lambda: f64,
    m: &ScMatrices,
) -> f64 {
    let km = m.kc() as f64;
    let positive = w.iter().filter(|x| **x > ZERO_WEIGHT_TOL).count() as f64;
    match rule {
        DfRule::Ols => m.j as f64 + km,
        DfRule::Lasso => {
            // lasso weights may be negative; count nonzero coefficients
            w.iter().filter(|x| x.abs() > ZERO_WEIGHT_TOL).count() as f64 + km
        }
        DfRule::Simplex => (positive - 1.0).max(0.0) + km,
        DfRule::Ridge => {
            let mut bw = m.b.clone();
            for (i, v) in m.v.iter().enumerate() {
                bw.row_mut(i).scale_mut(v.sqrt());
            }
            let shrink: f64 = bw
                .singular_values()
                .iter()
                .map(|s| {
                    let s2 = s * s;
                    if s2 + lambda > 0.0 {
                        s2 / (s2 + lambda)
                    } else {
                        0.0
                    }
                })
                .sum();
            shrink + km
        }
    }
}

/// Enforce sign and sum constraints exactly (the interior-point solution
/// meets them only to solver tolerance), then re-optimize `r` given `w`.
fn polish(m: &ScMatrices, cs: &ConstraintSystem, beta: &mut DVector<f64>) {
    let j = m.j;
    let nonneg = cs
        .ineqs
        .iter()
        .any(|c| matches!(c.kind, crate::constraints::IneqKind::NonNeg { .. }));
    if nonneg {
        for k in 0..j {
            beta[k] = beta[k].max(0.0);
        }
    }
    for e in &cs.eqs {
        if let crate::constraints::EqKind::Sum { target } = e.kind {
            let s: f64 = beta.rows(0, j).sum();
            if s > 0.0 && nonneg {
                beta.rows_mut(0, j).scale_mut(target / s);
            } else {
                let shift = (target - s) / j as f64;
                beta.rows_mut(0, j).add_scalar_mut(shift);
            }
        }
    }
    if m.kc() > 0 {
        let w = beta.rows(0, j).into_owned();
        let rest = &m.a - &m.b * w;
        let ls = linalg::lstsq(&m.c, &rest, Some(&m.v));
        beta.rows_mut(j, m.kc()).copy_from(&ls.coef);
    }
}

/// Fit the synthetic control weights under `spec`, resolving tuning values
/// first when they are unset.
pub fn fit(m: &ScMatrices, spec: &ConstraintSpec) -> Result<FitResult, EstimatorError> {
    let mut spec = *spec;
    let mut warnings = Vec::new();
    let tuning = if spec.needs_tuning() {
        let t = resolve_tuning(m, &spec)?;
        spec.q = t.q;
        spec.q2 = t.q2;
        warnings.extend(t.warnings.iter().cloned());
        Some(t)
    } else {
        None
    };
    let cs = spec.materialize(m.j, m.kc())?;
    let sol = solver::solve_wls(&m.a, &m.b, &m.c, &m.v, &cs)?;
    if sol.degenerate {
        warnings.push("the fit objective is not strictly convex; the reported optimum may not be unique".into());
    }
    let mut beta = sol.x.clone();
    polish(m, &cs, &mut beta);
    let z = m.z();
    let a_hat = &z * &beta;
    let u_hat = &m.a - &a_hat;
    let w_hat = beta.rows(0, m.j).into_owned();
    let r_hat = beta.rows(m.j, m.kc()).into_owned();

    let df_rule = DfRule::for_spec(&spec);
    let mut lambda = None;
    if df_rule == DfRule::Ridge {
        let q = match spec.p {
            Norm::L1L2 => spec.q2,
            _ => spec.q,
        }
        .expect("materialized ridge spec has Q");
        match ridge_lambda(m, &w_hat, &u_hat, q) {
            Some(l) if l >= 0.0 => lambda = Some(l),
            Some(l) => {
                warnings.push(format!(
                    "recovered ridge multiplier {l:.6e} is negative; degrees of freedom use 0"
                ));
                lambda = Some(0.0);
            }
            None => {
                warnings.push("the ℓ2 constraint is not binding; ridge multiplier set to 0".into());
                lambda = Some(0.0);
            }
        }
    }
    let df_hat = estimate_df(df_rule, &w_hat, lambda.unwrap_or(0.0), m);

    let y0_hat: Vec<Option<f64>> = (0..m.t1).map(|k| m.p_row(k).map(|p| p.dot(&beta))).collect();
    let tau_hat = y0_hat
        .iter()
        .zip(&m.y_post)
        .map(|(y0, y1)| Some((*y1)? - (*y0)?))
        .collect();
    let active_set = (0..m.j).filter(|&k| w_hat[k] > ZERO_WEIGHT_TOL).collect();

    Ok(FitResult {
        objective: solver::wls_objective(&m.a, &z, &m.v, &beta),
        q_used: spec.q,
        q2_used: spec.q2,
        spec,
        system: cs,
        w_hat,
        r_hat,
        beta_hat: beta,
        u_hat,
        a_hat,
        y0_hat,
        tau_hat,
        df_hat,
        df_rule,
        active_set,
        ridge_lambda: lambda,
        tuning,
        status: sol.status,
        kkt: sol.kkt,
        warnings,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// Plain-text report of a fit: setup, weights, covariate coefficients,
/// active donors and degrees of freedom.
pub fn render_summary(m: &ScMatrices, fit: &FitResult) -> String {
    let spec = &fit.spec;
    let mut s = String::new();
    let _ = writeln!(s, "Synthetic control prediction");
    let _ = writeln!(s, "  treated unit     {}", m.treated);
    let _ = writeln!(s, "  features         {}", m.features.join(", "));
    let _ = writeln!(
        s,
        "  M = {}, J = {}, KM = {}, T0 = {}, T1 = {}",
        m.m,
        m.j,
        m.kc(),
        m.t0,
        m.t1
    );
    let norm = match spec.p {
        Norm::None => "none",
        Norm::L1 => "L1",
        Norm::L2 => "L2",
        Norm::L1L2 => "L1-L2",
    };
    let dir = match spec.dir {
        None => "-",
        Some(Direction::Eq) => "==",
        Some(Direction::Le) => "<=",
        Some(Direction::EqLe) => "==/<=",
    };
    let lb = match spec.lb {
        LowerBound::Zero => "0",
        LowerBound::NegInf => "-Inf",
    };
    let _ = writeln!(
        s,
        "  constraint       {} (p = {norm}, dir = {dir}, Q = {}, Q2 = {}, lb = {lb})",
        spec.label(),
        fmt_opt(spec.q),
        fmt_opt(spec.q2)
    );
    let _ = writeln!(s, "  cointegrated     {}", m.cointegrated);
    let _ = writeln!(s);
    let _ = writeln!(s, "Weights");
    let width = m.donors.iter().map(String::len).max().unwrap_or(0).max(6);
    for (k, d) in m.donors.iter().enumerate() {
        let _ = writeln!(s, "  {d:<width$}  {:>10.3}", fit.w_hat[k]);
    }
    if m.kc() > 0 {
        let _ = writeln!(s);
        let _ = writeln!(s, "Covariates");
        let width = m.c_names.iter().map(String::len).max().unwrap_or(0).max(6);
        for (k, c) in m.c_names.iter().enumerate() {
            let _ = writeln!(s, "  {c:<width$}  {:>10.3}", fit.r_hat[k]);
        }
    }
    let _ = writeln!(s);
    let active: Vec<&str> = fit.active_set.iter().map(|k| m.donors[*k].as_str()).collect();
    let _ = writeln!(s, "Active donors ({}): {}", active.len(), active.join(", "));
    let _ = writeln!(s, "Degrees of freedom: {:.6}", fit.df_hat);
    let _ = writeln!(s, "Pre-treatment fit (weighted RSS): {:.6}", fit.objective);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::RawConstraint;

    fn fixture() -> ScMatrices {
        let b = DMatrix::from_row_slice(
            6,
            3,
            &[
                1.0, 2.0, 0.5, 2.0, 1.0, 1.5, 3.0, 2.5, 2.0, 4.0, 3.0, 3.5, 5.0, 4.5, 3.0, 6.0, 5.0,
                5.5,
            ],
        );
        let a = &b * DVector::from_vec(vec![0.5, 0.3, 0.2])
            + DVector::from_vec(vec![0.05, -0.02, 0.01, -0.03, 0.02, 0.0]);
        let c = DMatrix::zeros(6, 0);
        let p = DMatrix::from_row_slice(2, 3, &[7.0, 6.0, 6.5, 8.0, 7.0, 7.5]);
        ScMatrices::from_arrays(a, b, c, p, 1)
    }

    #[test]
    fn perfect_match_donor_gets_full_weight() {
        let b = DMatrix::from_row_slice(4, 2, &[1.0, 3.0, 2.0, 1.0, 4.0, 0.0, 3.0, 2.0]);
        let a = b.column(0).into_owned();
        let m = ScMatrices::from_arrays(a, b, DMatrix::zeros(4, 0), DMatrix::zeros(1, 2), 1);
        let f = fit(&m, &ConstraintSpec::preset(Preset::Simplex)).unwrap();
        assert!((f.w_hat[0] - 1.0).abs() < 1e-7);
        assert!(f.u_hat.amax() < 1e-6);
    }

    #[test]
    fn simplex_fit_is_exactly_feasible() {
        let m = fixture();
        let f = fit(&m, &ConstraintSpec::preset(Preset::Simplex)).unwrap();
        assert!(f.w_hat.iter().all(|w| *w >= -1e-9));
        assert!((f.w_hat.sum() - 1.0).abs() <= 1e-8);
        for k in 0..2 {
            let p = m.p_row(k).unwrap();
            assert_eq!(f.y0_hat[k], Some(p.dot(&f.beta_hat)));
        }
    }

    #[test]
    fn df_formulas() {
        let m = fixture();
        let w = DVector::from_vec(vec![0.5, 0.5, 1e-10]);
        assert_eq!(estimate_df(DfRule::Simplex, &w, 0.0, &m), 1.0);
        assert_eq!(estimate_df(DfRule::Lasso, &w, 0.0, &m), 2.0);
        assert_eq!(estimate_df(DfRule::Ols, &w, 0.0, &m), 3.0);
        assert!((estimate_df(DfRule::Ridge, &w, 0.0, &m) - 3.0).abs() < 1e-12);
        assert!(estimate_df(DfRule::Ridge, &w, 1e12, &m) < 1e-8);
    }

    #[test]
    fn lasso_default_q_is_one() {
        let m = fixture();
        let t = resolve_tuning(&m, &ConstraintSpec::preset(Preset::Lasso)).unwrap();
        assert_eq!(t.q, Some(1.0));
    }

    #[test]
    fn ridge_rule_zero_noise_limit() {
        // A = B w exactly: sigma² = 0, lambda = 0, Q = ||w_ols||.
        let b = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 3.0]);
        let a = &b * DVector::from_vec(vec![0.6, -0.8]);
        let m = ScMatrices::from_arrays(a, b, DMatrix::zeros(5, 0), DMatrix::zeros(1, 2), 1);
        let t = resolve_tuning(&m, &ConstraintSpec::preset(Preset::Ridge)).unwrap();
        assert!(t.ridge[0].lambda.abs() < 1e-20);
        assert!((t.q.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_lambda_satisfies_stationarity() {
        let m = fixture();
        let spec = ConstraintSpec::from_options(&RawConstraint {
            name: Some("ridge".into()),
            q: Some(0.3),
            ..Default::default()
        })
        .unwrap();
        let f = fit(&m, &spec).unwrap();
        let lambda = f.ridge_lambda.unwrap();
        assert!(lambda > 0.0);
        let g = m.b.transpose() * &f.u_hat;
        let scale = g.amax().max(1.0);
        assert!((&f.w_hat * lambda - g).amax() / scale < 1e-6);
        assert!(f.df_hat > 0.0 && f.df_hat < 3.0);
    }
}
