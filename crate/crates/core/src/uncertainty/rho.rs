//! The localization parameter `rho`.

use serde::{Deserialize, Serialize};

use super::UncertaintyError;
use crate::estimator::FitResult;
use crate::linalg;
use crate::panel::ScMatrices;

/// Scale constant in `rho = C log(T0)^c / sqrt(T0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RhoConstant {
    /// `sd(u) / min_j sd(b_j)`
    #[default]
    C1,
    /// `max_j sd(b_j) sd(u) / min_j var(b_j)`
    C2,
    /// `max_j |cov(b_j, u)| / min_j var(b_j)`
    C3,
}

/// `C log(T0)^c / sqrt(T0)` with `c = 1` for cointegrated data, `1/2` otherwise.
pub fn rho_formula(constant: f64, t0: f64, cointegrated: bool) -> f64 {
    let c = if cointegrated { 1.0 } else { 0.5 };
    constant * t0.ln().powf(c) / t0.sqrt()
}

/// The constant `C` from sample moments of the stacked residuals and donor
/// columns.
pub fn rho_constant(
    b: &nalgebra::DMatrix<f64>,
    u: &nalgebra::DVector<f64>,
    choice: RhoConstant,
) -> Result<f64, UncertaintyError> {
    let us = u.as_slice();
    let sd_u = linalg::sample_sd(us);
    let cols: Vec<Vec<f64>> = b.column_iter().map(|c| c.iter().copied().collect()).collect();
    let sd_b: Vec<f64> = cols.iter().map(|c| linalg::sample_sd(c)).collect();
    let min_sd = sd_b.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min_sd > 0.0) {
        let j = sd_b.iter().position(|s| !(*s > 0.0)).unwrap_or(0);
        return Err(UncertaintyError::ZeroDonorVariance(j));
    }
    let max_sd = sd_b.iter().copied().fold(0.0, f64::max);
    Ok(match choice {
        RhoConstant::C1 => sd_u / min_sd,
        RhoConstant::C2 => max_sd * sd_u / (min_sd * min_sd),
        RhoConstant::C3 => {
            let max_cov = cols
                .iter()
                .map(|c| linalg::sample_cov(c, us).abs())
                .fold(0.0, f64::max);
            max_cov / (min_sd * min_sd)
        }
    })
}

/// `rho` for a fit; an explicit override is returned unchanged.
pub fn compute_rho(
    m: &ScMatrices,
    fit: &FitResult,
    choice: RhoConstant,
    cointegrated: bool,
    rho_override: Option<f64>,
) -> Result<f64, UncertaintyError> {
    if let Some(r) = rho_override {
        return Ok(r);
    }
    let c = rho_constant(&m.b, &fit.u_hat, choice)?;
    Ok(rho_formula(c, (m.t0 * m.m) as f64, cointegrated))
}
