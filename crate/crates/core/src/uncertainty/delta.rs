//! The localized constraint set used in the simulated problems.

use nalgebra::DVector;
use serde::Serialize;

use crate::constraints::ConstraintSystem;

/// `Delta*` together with the per-constraint localization radii.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaStar {
    /// Constraints on `delta = beta - beta_hat`, evaluated at `beta_hat + delta`.
    #[serde(skip)]
    pub system: ConstraintSystem,
    pub rho_j: Vec<f64>,
    /// Indices of inequalities treated as binding.
    pub binding: Vec<usize>,
}

/// Localize `cs` around `beta_hat`: binding inequalities may not move
/// further out than at `beta_hat`, the others keep their original level,
/// equalities keep their value at `beta_hat`. `delta = 0` is always feasible.
pub fn build_delta_star(cs: &ConstraintSystem, beta_hat: &DVector<f64>, rho: f64) -> DeltaStar {
    let at_hat = cs.m_in(beta_hat);
    let eq_hat = cs.m_eq(beta_hat);
    let mut system = cs.clone();
    system.offset = beta_hat.clone();
    let mut rho_j = Vec::with_capacity(cs.d_in());
    let mut binding = Vec::new();
    for (k, c) in system.ineqs.iter_mut().enumerate() {
        let r = cs.grad_in(k, beta_hat).lp_norm(1) * rho;
        rho_j.push(r);
        let level = at_hat[k] + c.rhs;
        if level > -r {
            binding.push(k);
            c.rhs = level;
        } else {
            c.rhs = c.rhs.max(level);
        }
    }
    for (k, e) in system.eqs.iter_mut().enumerate() {
        e.rhs += eq_hat[k];
    }
    DeltaStar {
        system,
        rho_j,
        binding,
    }
}
