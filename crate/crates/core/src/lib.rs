//! Synthetic control point prediction with constrained weighted least
//! squares, and prediction intervals for treatment effects that combine
//! simulated in-sample bounds with out-of-sample error bounds.

pub mod constraints;
pub mod linalg;
pub mod panel;
pub mod solver;
pub mod estimator;
pub mod uncertainty;
