//! Bounds on the out-of-sample error `e_t` of the outcome equation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::{self, Rows};
use super::{UncertaintyConfig, UncertaintyError};
use crate::estimator::FitResult;
use crate::linalg;
use crate::panel::ScMatrices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EMethod {
    /// Sub-Gaussian concentration bound.
    #[default]
    Gaussian,
    /// Location-scale model with empirical quantiles of standardized residuals.
    Ls,
    /// Linear quantile regression.
    Qreg,
}

/// Residual-model data: pre-period design rows with the residuals they
/// explain, and the design row at each post period.
#[derive(Debug, Clone, PartialEq)]
pub struct OosData {
    pub x_pre: DMatrix<f64>,
    pub e: DVector<f64>,
    pub x_post: Vec<Option<DVector<f64>>>,
}

impl OosData {
    /// Intercept-only model on the given residuals, for `T1` post periods.
    pub fn intercept_only(e: DVector<f64>, t1: usize) -> Self {
        Self {
            x_pre: DMatrix::from_element(e.len(), 1, 1.0),
            e,
            x_post: vec![Some(DVector::from_element(1, 1.0)); t1],
        }
    }
}

/// Build the residual-model data for the outcome block from the selected
/// donors. Pre and post rows come from one time series, so lags and
/// differences at the first post periods reach back into the pre period.
pub fn oos_data(
    m: &ScMatrices,
    fit: &FitResult,
    donors: &[usize],
    cfg: &UncertaintyConfig,
) -> Result<OosData, UncertaintyError> {
    let l = m.outcome_block();
    let (t0, t1) = (m.t0, m.t1);
    let e = fit.u_hat.rows(l * t0, t0).into_owned();
    if let Some(d) = &cfg.e_design {
        if d.nrows() != t0 + t1 {
            return Err(UncertaintyError::Config(format!(
                "e_design needs T0 + T1 = {} rows, has {}",
                t0 + t1,
                d.nrows()
            )));
        }
        return Ok(OosData {
            x_pre: d.rows(0, t0).into_owned(),
            e,
            x_post: (0..t1)
                .map(|k| m.p_rows[k].map(|_| d.row(t0 + k).transpose()))
                .collect(),
        });
    }
    if cfg.e_order == 0 && cfg.e_lags == 0 {
        let mut data = OosData::intercept_only(e, t1);
        for (k, row) in data.x_post.iter_mut().enumerate() {
            if m.p_rows[k].is_none() {
                *row = None;
            }
        }
        return Ok(data);
    }

    let c_cols: Vec<usize> = (0..m.kc())
        .filter(|&k| (0..t0).any(|t| m.c[(l * t0 + t, k)] != 0.0))
        .collect();
    let mut series: Vec<Option<Vec<f64>>> = Vec::with_capacity(t0 + t1);
    let mut covs: Vec<Option<Vec<f64>>> = Vec::with_capacity(t0 + t1);
    for t in 0..t0 {
        let i = l * t0 + t;
        series.push(Some(donors.iter().map(|&j| m.b[(i, j)]).collect()));
        covs.push(Some(c_cols.iter().map(|&k| m.c[(i, k)]).collect()));
    }
    for k in 0..t1 {
        let p = m.p_row(k);
        series.push(p.as_ref().map(|p| donors.iter().map(|&j| p[j]).collect()));
        covs.push(p.as_ref().map(|p| c_cols.iter().map(|&c| p[m.j + c]).collect()));
    }
    let terms = design::series_terms(&series, cfg.e_order, cfg.e_lags, m.cointegrated);
    let pre_covs: Vec<Vec<f64>> = covs[..t0].iter().flatten().cloned().collect();
    let intercept = !design::has_constant_column(&pre_covs);
    let rows: Rows = terms
        .into_iter()
        .zip(covs)
        .map(|(t, c)| {
            let mut row = t?;
            row.extend(c?);
            if intercept {
                row.push(1.0);
            }
            Some(row)
        })
        .collect();
    let idx: Vec<usize> = (0..t0).filter(|&t| rows[t].is_some()).collect();
    let cols = rows.iter().flatten().map(Vec::len).next().unwrap_or(1);
    Ok(OosData {
        x_pre: DMatrix::from_fn(idx.len(), cols, |r, c| rows[idx[r]].as_ref().unwrap()[c]),
        e: DVector::from_iterator(idx.len(), idx.iter().map(|&t| e[t])),
        x_post: (0..t1)
            .map(|k| rows[t0 + k].as_ref().map(|r| DVector::from_column_slice(r)))
            .collect(),
    })
}

/// Mean regression of `e` and variance regression of the squared
/// residuals on the same design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianModel {
    mean_coef: DVector<f64>,
    var_coef: DVector<f64>,
    /// `n / (n - rank)`, the degrees-of-freedom correction of the variance fit.
    var_scale: f64,
    /// Unconditional variance, used where the fitted variance is not positive.
    var_floor: f64,
    /// Pre-period residuals of the mean regression.
    #[serde(skip)]
    resid: DVector<f64>,
}

impl GaussianModel {
    pub fn fit(x: &DMatrix<f64>, e: &DVector<f64>, warnings: &mut Vec<String>) -> Self {
        let n = e.len();
        let mean = linalg::lstsq(x, e, None);
        let resid = e - &mean.fitted;
        let sq = resid.map(|r| r * r);
        let var = linalg::lstsq(x, &sq, None);
        let var_scale = if n > mean.rank {
            n as f64 / (n - mean.rank) as f64
        } else {
            warnings.push("out-of-sample model has no residual degrees of freedom".into());
            1.0
        };
        let var_floor = sq.mean() * var_scale;
        Self {
            mean_coef: mean.coef,
            var_coef: var.coef,
            var_scale,
            var_floor,
            resid,
        }
    }

    pub fn mean(&self, row: &DVector<f64>) -> f64 {
        row.dot(&self.mean_coef)
    }

    /// Fitted conditional variance and whether it had to be floored.
    pub fn variance(&self, row: &DVector<f64>) -> (f64, bool) {
        let v = row.dot(&self.var_coef) * self.var_scale;
        if v > 0.0 {
            (v, false)
        } else {
            (self.var_floor.max(0.0), true)
        }
    }
}

/// `sqrt(2 sigma^2 log(2 L / alpha))`.
pub fn gaussian_halfwidth(sigma2: f64, alpha: f64, horizon: usize) -> f64 {
    (2.0 * sigma2 * (2.0 * horizon as f64 / alpha).ln()).sqrt()
}

/// Linear quantile regression at level `tau` by majorize-minimize
/// reweighted least squares on the pinball loss, starting from OLS.
pub fn quantile_regression(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64) -> DVector<f64> {
    const SMOOTH: f64 = 1e-6;
    const ITERS: usize = 100;
    let mut coef = linalg::lstsq(x, y, None).coef;
    for _ in 0..ITERS {
        let r = y - x * &coef;
        let w = r.map(|ri| 1.0 / (4.0 * ri.abs().max(SMOOTH)));
        // X'WX b = X'W y + (tau - 1/2)/2 X'1, written as weighted LS on a shifted response
        let shift = (tau - 0.5) / 2.0;
        let y_shift = DVector::from_fn(y.len(), |i, _| y[i] + shift / w[i]);
        let next = linalg::lstsq(x, &y_shift, Some(&w)).coef;
        let done = (&next - &coef).amax() <= 1e-12 * coef.amax().max(1.0);
        coef = next;
        if done {
            break;
        }
    }
    coef
}

/// Out-of-sample bounds per post period, plus joint bounds over the first
/// `L` periods when requested.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutOfSampleBounds {
    pub method: EMethod,
    pub mean: Vec<Option<f64>>,
    /// Conditional standard deviation from the variance fit.
    pub sigma: Vec<Option<f64>>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    pub joint: Option<(Vec<Option<f64>>, Vec<Option<f64>>)>,
}

pub fn out_of_sample_bounds(
    data: &OosData,
    method: EMethod,
    alpha: f64,
    joint_horizon: Option<usize>,
    warnings: &mut Vec<String>,
) -> OutOfSampleBounds {
    let g = GaussianModel::fit(&data.x_pre, &data.e, warnings);
    let t1 = data.x_post.len();
    let mut floored = 0;
    let moments: Vec<Option<(f64, f64)>> = data
        .x_post
        .iter()
        .map(|row| {
            let row = row.as_ref()?;
            let (v, f) = g.variance(row);
            floored += usize::from(f);
            Some((g.mean(row), v))
        })
        .collect();
    if floored > 0 {
        warnings.push(format!(
            "fitted out-of-sample variance not positive in {floored} period(s); floored at the unconditional variance"
        ));
    }
    let mean: Vec<Option<f64>> = moments.iter().map(|m| m.map(|x| x.0)).collect();
    let sigma: Vec<Option<f64>> = moments.iter().map(|m| m.map(|x| x.1.sqrt())).collect();
    let gauss = |h: usize| -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let hw: Vec<Option<(f64, f64)>> = moments
            .iter()
            .map(|m| m.map(|(mu, v)| (mu, gaussian_halfwidth(v, alpha, h))))
            .collect();
        (
            hw.iter().map(|x| x.map(|(mu, w)| mu - w)).collect(),
            hw.iter().map(|x| x.map(|(mu, w)| mu + w)).collect(),
        )
    };

    let (lower, upper) = match method {
        EMethod::Gaussian => gauss(1),
        EMethod::Ls => {
            let z: Vec<f64> = (0..data.e.len())
                .filter_map(|i| {
                    let row = data.x_pre.row(i).transpose();
                    let (v, _) = g.variance(&row);
                    (v > 0.0).then(|| g.resid[i] / v.sqrt())
                })
                .collect();
            if z.is_empty() {
                warnings.push("no standardized residuals available; ls bounds collapse to the mean".into());
                (mean.clone(), mean.clone())
            } else {
                let (cl, cu) = (linalg::quantile(&z, alpha / 2.0), linalg::quantile(&z, 1.0 - alpha / 2.0));
                (
                    moments.iter().map(|m| m.map(|(mu, v)| mu + v.sqrt() * cl)).collect(),
                    moments.iter().map(|m| m.map(|(mu, v)| mu + v.sqrt() * cu)).collect(),
                )
            }
        }
        EMethod::Qreg => {
            let bl = quantile_regression(&data.x_pre, &data.e, alpha / 2.0);
            let bu = quantile_regression(&data.x_pre, &data.e, 1.0 - alpha / 2.0);
            let mut crossed = 0;
            let pairs: Vec<Option<(f64, f64)>> = data
                .x_post
                .iter()
                .map(|row| {
                    let row = row.as_ref()?;
                    let (lo, hi) = (row.dot(&bl), row.dot(&bu));
                    if lo > hi {
                        crossed += 1;
                        Some((hi, lo))
                    } else {
                        Some((lo, hi))
                    }
                })
                .collect();
            if crossed > 0 {
                warnings.push(format!("quantile regression fits cross in {crossed} period(s); bounds swapped"));
            }
            (
                pairs.iter().map(|p| p.map(|x| x.0)).collect(),
                pairs.iter().map(|p| p.map(|x| x.1)).collect(),
            )
        }
    };

    let joint = joint_horizon.map(|h| {
        if method != EMethod::Gaussian {
            warnings.push("joint out-of-sample bounds use the gaussian method".into());
        }
        let h = h.min(t1);
        let (l, u) = gauss(h);
        (l[..h].to_vec(), u[..h].to_vec())
    });
    OutOfSampleBounds {
        method,
        mean,
        sigma,
        lower,
        upper,
        joint,
    }
}
