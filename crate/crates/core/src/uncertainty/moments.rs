//! Conditional moments of the pseudo-true residual and the variance of the
//! score `Z'V u`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::{self, Rows};
use super::UncertaintyConfig;
use crate::estimator::FitResult;
use crate::linalg;
use crate::panel::ScMatrices;

/// Heteroskedasticity-robust variance corrections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VarianceCorrection {
    HC0,
    #[default]
    HC1,
    HC2,
    HC3,
    HC4,
}

/// Leverage values at or above `1 - LEVERAGE_ONE` get no correction.
const LEVERAGE_ONE: f64 = 1e-10;

/// Donors kept for residual modelling: `|w_j| > rho`, or the largest
/// `|w_j|` when none passes.
pub fn regularized_donors(w: &DVector<f64>, rho: f64) -> Vec<usize> {
    let sel: Vec<usize> = (0..w.len()).filter(|&j| w[j].abs() > rho).collect();
    if !sel.is_empty() || w.is_empty() {
        return sel;
    }
    let best = (0..w.len())
        .max_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()))
        .expect("nonempty");
    vec![best]
}

/// Time series of the selected donor columns in feature block `l` over the
/// pre periods.
pub fn block_series(m: &ScMatrices, l: usize, donors: &[usize]) -> Vec<Option<Vec<f64>>> {
    (0..m.t0)
        .map(|t| Some(donors.iter().map(|&j| m.b[(l * m.t0 + t, j)]).collect()))
        .collect()
}

/// Variance-correction constants `vc_i`.
///
/// `leverage` is the diagonal of `Z (Z'VZ)^-1 Z'V`; `n = T0 M`.
pub fn variance_corrections(
    kind: VarianceCorrection,
    leverage: &[f64],
    df: f64,
    warnings: &mut Vec<String>,
) -> Vec<f64> {
    let n = leverage.len() as f64;
    let mut capped = 0;
    let mut vc: Vec<f64> = leverage
        .iter()
        .map(|&l| {
            let one_minus = 1.0 - l;
            let needs_leverage = matches!(
                kind,
                VarianceCorrection::HC2 | VarianceCorrection::HC3 | VarianceCorrection::HC4
            );
            if needs_leverage && one_minus <= LEVERAGE_ONE {
                capped += 1;
                return 1.0;
            }
            match kind {
                VarianceCorrection::HC0 | VarianceCorrection::HC1 => 1.0,
                VarianceCorrection::HC2 => 1.0 / one_minus,
                VarianceCorrection::HC3 => 1.0 / (one_minus * one_minus),
                VarianceCorrection::HC4 => {
                    let delta = if df > 0.0 { (n * l / df).min(4.0) } else { 4.0 };
                    one_minus.powf(-delta)
                }
            }
        })
        .collect();
    if kind == VarianceCorrection::HC1 {
        if n - df > 0.0 {
            vc.fill(n / (n - df));
        } else {
            warnings.push(format!(
                "HC1 correction undefined with T0*M = {n} and df = {df}; using 1"
            ));
        }
    }
    if capped > 0 {
        warnings.push(format!(
            "{capped} observation(s) with leverage one; their variance correction is set to 1"
        ));
    }
    vc
}

/// Diagonal of `Z (Z'VZ)^+ Z'V`.
pub fn leverage(z: &DMatrix<f64>, v: &DVector<f64>) -> Vec<f64> {
    let mut zv = z.clone();
    for (i, w) in v.iter().enumerate() {
        zv.row_mut(i).scale_mut(*w);
    }
    let inv = linalg::pinv(&(z.transpose() * &zv));
    (0..z.nrows())
        .map(|i| {
            let zi = z.row(i);
            (zi * &inv * zi.transpose())[(0, 0)] * v[i]
        })
        .collect()
}

/// Fitted residual moments and the matrices of the simulated criterion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualMoments {
    /// Donors with nonzero regularized weight.
    pub donors: Vec<usize>,
    pub e_u: DVector<f64>,
    /// Diagonal of the conditional variance estimate.
    pub v_u: DVector<f64>,
    pub vc: Vec<f64>,
    pub leverage: Vec<f64>,
    /// Columns of the residual design (0 when means or zero are used).
    pub design_cols: usize,
    pub design_rank: usize,
    pub df_used: f64,
}

/// Rows of the default residual design: per-block donor terms placed
/// block-diagonally, then `C`, then per-block intercepts where `C` has none.
fn default_u_design(m: &ScMatrices, donors: &[usize], cfg: &UncertaintyConfig) -> Rows {
    let n = m.t0 * m.m;
    let blocks: Vec<Rows> = (0..m.m)
        .map(|l| {
            design::series_terms(&block_series(m, l, donors), cfg.u_order, cfg.u_lags, m.cointegrated)
        })
        .collect();
    let widths: Vec<usize> = blocks
        .iter()
        .map(|b| b.iter().flatten().map(Vec::len).next().unwrap_or(0))
        .collect();
    let needs_intercept: Vec<bool> = (0..m.m)
        .map(|l| {
            let rows: Vec<Vec<f64>> = (0..m.t0)
                .map(|t| m.c.row(l * m.t0 + t).iter().copied().collect())
                .collect();
            !design::has_constant_column(&rows)
        })
        .collect();
    let n_int = needs_intercept.iter().filter(|b| **b).count();
    let total: usize = widths.iter().sum::<usize>() + m.kc() + n_int;
    (0..n)
        .map(|i| {
            let (l, t) = (i / m.t0, i % m.t0);
            let own = blocks[l][t].as_ref()?;
            let mut row = vec![0.0; total];
            let off: usize = widths[..l].iter().sum();
            row[off..off + own.len()].copy_from_slice(own);
            let mut at = widths.iter().sum::<usize>();
            for k in 0..m.kc() {
                row[at + k] = m.c[(i, k)];
            }
            at += m.kc();
            for (b, need) in needs_intercept.iter().enumerate() {
                if *need {
                    if b == l {
                        row[at] = 1.0;
                    }
                    at += 1;
                }
            }
            Some(row)
        })
        .collect()
}

/// Per-feature means of `u`, replicated over each block.
fn block_means(u: &DVector<f64>, m: &ScMatrices) -> DVector<f64> {
    let mut out = DVector::zeros(u.len());
    for l in 0..m.m {
        let mean = u.rows(l * m.t0, m.t0).mean();
        out.rows_mut(l * m.t0, m.t0).fill(mean);
    }
    out
}

/// Regress `u` on the defined rows of `design`; undefined rows get the
/// per-feature mean.
fn fit_mean(u: &DVector<f64>, design: &Rows, m: &ScMatrices, warnings: &mut Vec<String>) -> (DVector<f64>, usize, usize) {
    let idx: Vec<usize> = (0..design.len()).filter(|&i| design[i].is_some()).collect();
    let cols = design.iter().flatten().map(Vec::len).next().unwrap_or(0);
    let means = block_means(u, m);
    if idx.is_empty() || cols == 0 {
        return (means, cols, 0);
    }
    let x = DMatrix::from_fn(idx.len(), cols, |r, c| design[idx[r]].as_ref().unwrap()[c]);
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| u[i]));
    let ls = linalg::lstsq(&x, &y, None);
    if !ls.is_full_rank() {
        warnings.push(format!(
            "residual design has rank {} < {cols} columns; using the minimum-norm fit",
            ls.rank
        ));
    }
    let mut e = means;
    for (r, &i) in idx.iter().enumerate() {
        e[i] = ls.fitted[r];
    }
    (e, cols, ls.rank)
}

/// Conditional mean and variance of `u` given the pre-treatment data.
pub fn estimate_u_moments(
    m: &ScMatrices,
    fit: &FitResult,
    cfg: &UncertaintyConfig,
    rho: f64,
    warnings: &mut Vec<String>,
) -> ResidualMoments {
    let u = &fit.u_hat;
    let donors = regularized_donors(&fit.w_hat, rho);
    let (e_u, design_cols, design_rank) = if !cfg.u_missp {
        (DVector::zeros(u.len()), 0, 0)
    } else if let Some(d) = &cfg.u_design {
        let rows: Rows = d.row_iter().map(|r| Some(r.iter().copied().collect())).collect();
        fit_mean(u, &rows, m, warnings)
    } else if cfg.u_order == 0 && cfg.u_lags == 0 {
        (block_means(u, m), 0, 0)
    } else {
        fit_mean(u, &default_u_design(m, &donors, cfg), m, warnings)
    };
    let lev = leverage(&m.z(), &m.v);
    let vc = variance_corrections(cfg.u_sigma, &lev, fit.df_hat, warnings);
    let v_u = DVector::from_fn(u.len(), |i, _| vc[i] * (u[i] - e_u[i]).powi(2));
    ResidualMoments {
        donors,
        e_u,
        v_u,
        vc,
        leverage: lev,
        design_cols,
        design_rank,
        df_used: fit.df_hat,
    }
}

/// `Sigma = Z'V diag(v_u) V Z` and `Q = Z'V Z`.
pub fn score_moments(m: &ScMatrices, v_u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let z = m.z();
    let mut vz = z.clone();
    let mut vvz = z.clone();
    for i in 0..z.nrows() {
        vz.row_mut(i).scale_mut(m.v[i]);
        vvz.row_mut(i).scale_mut(m.v[i] * m.v[i] * v_u[i]);
    }
    let sigma = z.transpose() * vvz;
    let q = z.transpose() * vz;
    (
        (&sigma + sigma.transpose()) * 0.5,
        (&q + q.transpose()) * 0.5,
    )
}
