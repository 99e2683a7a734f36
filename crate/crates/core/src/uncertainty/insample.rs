//! Simulated bounds on the in-sample error `p_t'(beta_0 - beta_hat)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::UncertaintyError;
use crate::constraints::ConstraintSystem;
use crate::linalg;
use crate::solver::{LevelSet, LevelSetWorkspace, Sense, SolveStatus};

/// Bounds of one simulated problem family, per post period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InSampleBounds {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    /// Joint bounds for the first `L` periods (ε-adjusted per period).
    pub joint: Option<JointBounds>,
    /// Draws dropped because a subproblem failed.
    pub failed_draws: usize,
    /// Subproblems reported unbounded.
    pub unbounded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointBounds {
    pub horizon: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Settings of the simulation.
#[derive(Debug, Clone)]
pub struct SimulationSpec<'a> {
    /// Prediction row per post period; `None` for unavailable periods.
    pub p_rows: &'a [Option<DVector<f64>>],
    pub sims: usize,
    pub alpha: f64,
    pub seed: u64,
    pub cores: usize,
    /// Joint horizon `L`, counted over the leading post periods.
    pub joint_horizon: Option<usize>,
    /// Widening per period; applied to joint bounds always and to the
    /// per-period bounds when `eps_per_period` is set.
    pub eps: Option<Vec<f64>>,
    pub eps_per_period: bool,
}

/// Bounds from one draw: `(l_t, u_t)` for every period; `None` on failure.
type DrawBounds = Option<Vec<Option<(f64, f64)>>>;

/// The Gaussian vector `G*` of draw `s`: `F xi` with `xi` from the `s`-th
/// stream of the seeded generator, so each draw is reproducible on its own.
pub fn draw_g(factor: &DMatrix<f64>, seed: u64, s: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    let xi = DVector::from_fn(factor.ncols(), |_, _| StandardNormal.sample(&mut rng));
    factor * xi
}

fn solve_draw(
    level: &mut LevelSetWorkspace<'_>,
    g: &DVector<f64>,
    p_rows: &[Option<DVector<f64>>],
) -> (DrawBounds, usize) {
    let mut out = Vec::with_capacity(p_rows.len());
    let mut unbounded = 0;
    for p in p_rows {
        let Some(p) = p else {
            out.push(None);
            continue;
        };
        let lo = level.solve(p, g, Sense::Min);
        let hi = level.solve(p, g, Sense::Max);
        match (lo, hi) {
            (Ok(lo), Ok(hi)) => {
                unbounded += usize::from(lo.status == SolveStatus::Unbounded)
                    + usize::from(hi.status == SolveStatus::Unbounded);
                out.push(Some((lo.objective, hi.objective)));
            }
            _ => return (None, unbounded),
        }
    }
    (Some(out), unbounded)
}

/// Simulate `S` criterion functions and take quantiles of the optimal
/// values of `p_t' delta` over `Delta*` and the level set.
pub fn in_sample_bounds(
    qhat: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    delta_star: &ConstraintSystem,
    spec: &SimulationSpec<'_>,
) -> Result<InSampleBounds, UncertaintyError> {
    let (factor, _) = linalg::psd_factor(sigma);
    let level = LevelSet::new(qhat, delta_star.clone());
    let t1 = spec.p_rows.len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.cores.max(1))
        .build()
        .map_err(|e| UncertaintyError::Config(format!("worker pool: {e}")))?;
    // fail early on setup errors rather than once per draw
    level.workspace(sigma)?;
    let draws: Vec<(DrawBounds, usize)> = pool.install(|| {
        (0..spec.sims)
            .into_par_iter()
            .map_init(
                || level.workspace(sigma).expect("workspace built above"),
                |ws, s| solve_draw(ws, &draw_g(&factor, spec.seed, s), spec.p_rows),
            )
            .collect()
    });
    let unbounded = draws.iter().map(|d| d.1).sum();
    let ok: Vec<&Vec<Option<(f64, f64)>>> = draws.iter().filter_map(|d| d.0.as_ref()).collect();
    let failed_draws = spec.sims - ok.len();
    if ok.is_empty() {
        return Err(UncertaintyError::SimulationFailed(spec.sims));
    }
    let eps_at = |t: usize| spec.eps.as_ref().map_or(0.0, |e| e[t]);
    let lo_q = spec.alpha / 2.0;
    let hi_q = 1.0 - spec.alpha / 2.0;

    let mut lower = vec![None; t1];
    let mut upper = vec![None; t1];
    for t in 0..t1 {
        if spec.p_rows[t].is_none() {
            continue;
        }
        let ls: Vec<f64> = ok.iter().map(|d| d[t].expect("available period").0).collect();
        let us: Vec<f64> = ok.iter().map(|d| d[t].expect("available period").1).collect();
        let widen = if spec.eps_per_period { eps_at(t) } else { 0.0 };
        lower[t] = Some(linalg::quantile(&ls, lo_q) - widen);
        upper[t] = Some(linalg::quantile(&us, hi_q) + widen);
    }

    let joint = match spec.joint_horizon {
        None => None,
        Some(h) => {
            let periods: Vec<usize> = (0..h.min(t1)).filter(|&t| spec.p_rows[t].is_some()).collect();
            if periods.is_empty() {
                None
            } else {
                let env_l: Vec<f64> = ok
                    .iter()
                    .map(|d| periods.iter().map(|&t| d[t].unwrap().0).fold(f64::INFINITY, f64::min))
                    .collect();
                let env_u: Vec<f64> = ok
                    .iter()
                    .map(|d| periods.iter().map(|&t| d[t].unwrap().1).fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                let (ql, qu) = (linalg::quantile(&env_l, lo_q), linalg::quantile(&env_u, hi_q));
                Some(JointBounds {
                    horizon: h.min(t1),
                    lower: (0..h.min(t1)).map(|t| ql - eps_at(t)).collect(),
                    upper: (0..h.min(t1)).map(|t| qu + eps_at(t)).collect(),
                })
            }
        }
    };
    Ok(InSampleBounds {
        lower,
        upper,
        joint,
        failed_draws,
        unbounded,
    })
}
