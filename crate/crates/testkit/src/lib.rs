//! Test support for the scpi crates: brute-force reference solutions of the
//! constrained least-squares fit and a simulated linear-factor design.
//!
//! Nothing here depends on the scpi crates themselves, so the oracles stay
//! independent of the code they check.

pub mod dgp;
pub mod oracle;
