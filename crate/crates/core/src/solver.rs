//! Conic reformulations of the weighted least-squares fit and of the
//! simulated level-set problems, solved by a primal-dual interior-point
//! method (Clarabel).
//!
//! Both problems are rescaled before solving: fit variables by the
//! V-weighted column norms of `Z = [B C]` and the norm of `A`, level-set
//! variables by `sqrt(diag(Q))` and the size of `G`. Solutions and
//! objective values are reported in original units; KKT residuals are
//! reported in the scaled problem.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::constraints::{ConstraintSystem, EqKind, IneqKind};
use crate::linalg;

/// Feasibility and duality-gap tolerance.
pub const TOL: f64 = 1e-8;
pub const MAX_ITER: u32 = 200;
/// Residual level under which an iteration-capped solve is still accepted.
const ACCEPT_RESIDUAL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("constraint set is empty")]
    Infeasible,
    #[error("solver failed to converge ({0})")]
    NumericalFailure(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// Infinity-norm KKT residuals of the scaled conic problem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// `beta` for fits, `delta` for level-set problems.
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub iterations: u32,
    /// The solver stopped at its reduced-accuracy thresholds.
    pub reduced_accuracy: bool,
    /// The objective is not strictly convex: other optima may exist.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Min,
    Max,
}

/// Accumulates `A y + s = b, s in K` row blocks.
struct Conic {
    nvar: usize,
    ti: Vec<usize>,
    tj: Vec<usize>,
    tv: Vec<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

type Row = (Vec<(usize, f64)>, f64);

impl Conic {
    fn new(nvar: usize) -> Self {
        Self {
            nvar,
            ti: Vec::new(),
            tj: Vec::new(),
            tv: Vec::new(),
            b: Vec::new(),
            cones: Vec::new(),
        }
    }

    fn add_vars(&mut self, k: usize) -> usize {
        let start = self.nvar;
        self.nvar += k;
        start
    }

    fn push(&mut self, rows: Vec<Row>, cone: fn(usize) -> SupportedConeT<f64>) {
        if rows.is_empty() {
            return;
        }
        let n = rows.len();
        for (coefs, rhs) in rows {
            let r = self.b.len();
            for (j, v) in coefs {
                if v != 0.0 {
                    self.ti.push(r);
                    self.tj.push(j);
                    self.tv.push(v);
                }
            }
            self.b.push(rhs);
        }
        self.cones.push(cone(n));
    }

    /// Add the constraints of `cs` with `beta_i = offset_i + mu_i * y_i`.
    /// A sphere equality is relaxed to its ball.
    fn add_system(&mut self, cs: &ConstraintSystem, mu: &DVector<f64>) {
        let j = cs.j;
        let off = &cs.offset;
        for e in &cs.eqs {
            match e.kind {
                EqKind::Sum { target } => {
                    let coefs = (0..j).map(|i| (i, mu[i])).collect();
                    let base: f64 = (0..j).map(|i| off[i]).sum();
                    self.push(vec![(coefs, target + e.rhs - base)], SupportedConeT::ZeroConeT);
                }
                EqKind::L2Sphere { radius } => self.add_l2_ball(j, off, mu, radius + e.rhs),
            }
        }
        let mut nonneg = Vec::new();
        for c in &cs.ineqs {
            if let IneqKind::NonNeg { index } = c.kind {
                nonneg.push((vec![(index, -mu[index])], c.rhs + off[index]));
            }
        }
        self.push(nonneg, SupportedConeT::NonnegativeConeT);
        for c in &cs.ineqs {
            match c.kind {
                IneqKind::NonNeg { .. } => {}
                IneqKind::L2Ball { radius } => self.add_l2_ball(j, off, mu, radius + c.rhs),
                IneqKind::L1Ball { radius } => {
                    // w = w+ - w-, w± >= 0, sum(w+ + w-) <= radius
                    let pos = self.add_vars(j);
                    let neg = self.add_vars(j);
                    let split = (0..j)
                        .map(|i| (vec![(i, mu[i]), (pos + i, -1.0), (neg + i, 1.0)], -off[i]))
                        .collect();
                    self.push(split, SupportedConeT::ZeroConeT);
                    let mut rows: Vec<Row> =
                        (0..2 * j).map(|k| (vec![(pos + k, -1.0)], 0.0)).collect();
                    rows.push(((0..2 * j).map(|k| (pos + k, 1.0)).collect(), radius + c.rhs));
                    self.push(rows, SupportedConeT::NonnegativeConeT);
                }
            }
        }
    }

    fn add_l2_ball(&mut self, j: usize, off: &DVector<f64>, mu: &DVector<f64>, radius: f64) {
        let mut rows: Vec<Row> = vec![(Vec::new(), radius)];
        rows.extend((0..j).map(|i| (vec![(i, -mu[i])], off[i])));
        self.push(rows, SupportedConeT::SecondOrderConeT);
    }

    /// Pin variables that no constraint touches to zero and return them; the
    /// interior-point method stalls on such columns. Their cost decides
    /// boundedness and is checked by the caller.
    fn pin_free_columns(&mut self) -> Vec<usize> {
        let mut used = vec![false; self.nvar];
        for &j in &self.tj {
            used[j] = true;
        }
        let free: Vec<usize> = (0..self.nvar).filter(|&j| !used[j]).collect();
        let rows = free.iter().map(|&j| (vec![(j, 1.0)], 0.0)).collect();
        self.push(rows, SupportedConeT::ZeroConeT);
        free
    }

    fn matrix(&self) -> CscMatrix<f64> {
        CscMatrix::new_from_triplets(
            self.b.len(),
            self.nvar,
            self.ti.clone(),
            self.tj.clone(),
            self.tv.clone(),
        )
    }
}

fn csc_mul(m: &CscMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for c in 0..m.n {
        for k in m.colptr[c]..m.colptr[c + 1] {
            out[m.rowval[k]] += m.nzval[k] * x[c];
        }
    }
}

fn csc_tmul(m: &CscMatrix<f64>, z: &[f64], out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate().take(m.n) {
        for k in m.colptr[c]..m.colptr[c + 1] {
            *o += m.nzval[k] * z[m.rowval[k]];
        }
    }
}

/// Symmetric product with an upper-triangular CSC matrix.
fn csc_sym_mul(m: &CscMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for c in 0..m.n {
        for k in m.colptr[c]..m.colptr[c + 1] {
            let r = m.rowval[k];
            out[r] += m.nzval[k] * x[c];
            if r != c {
                out[c] += m.nzval[k] * x[r];
            }
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

struct RawSolve {
    y: Vec<f64>,
    status: SolverStatus,
    kkt: KktResiduals,
    iterations: u32,
}

fn settings(reusable: bool) -> Result<clarabel::solver::DefaultSettings<f64>, SolverError> {
    DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(MAX_ITER)
        .tol_feas(TOL)
        .tol_gap_abs(TOL)
        .tol_gap_rel(TOL)
        // presolve rewrites the problem and would forbid data updates
        .presolve_enable(!reusable)
        .build()
        .map_err(|e| SolverError::NumericalFailure(e.to_string()))
}

fn run_clarabel(p: &CscMatrix<f64>, q: &[f64], conic: &Conic) -> Result<RawSolve, SolverError> {
    let a = conic.matrix();
    let mut solver = DefaultSolver::new(p, q, &a, &conic.b, &conic.cones, settings(false)?)
        .map_err(|e| SolverError::Dimension(format!("{e:?}")))?;
    solver.solve();
    Ok(raw_solve(&solver, p, q, &a, &conic.b))
}

/// Read the solution off `solver` and compute its KKT residuals against
/// the unscaled data.
fn raw_solve(
    solver: &DefaultSolver<f64>,
    p: &CscMatrix<f64>,
    q: &[f64],
    a: &CscMatrix<f64>,
    b: &[f64],
) -> RawSolve {
    let sol = &solver.solution;
    let mut rp = vec![0.0; b.len()];
    csc_mul(a, &sol.x, &mut rp);
    for (i, r) in rp.iter_mut().enumerate() {
        *r += sol.s[i] - b[i];
    }
    let mut rd = q.to_vec();
    csc_sym_mul(p, &sol.x, &mut rd);
    csc_tmul(a, &sol.z, &mut rd[..a.n]);
    let gap: f64 = sol.s.iter().zip(&sol.z).map(|(s, z)| s * z).sum();
    RawSolve {
        y: sol.x.clone(),
        status: sol.status,
        kkt: KktResiduals {
            primal: inf_norm(&rp),
            dual: inf_norm(&rd),
            complementarity: gap.abs(),
        },
        iterations: sol.iterations,
    }
}

/// Map a raw status to the public one; `Err` for hard failures.
fn classify(raw: &RawSolve) -> Result<(SolveStatus, bool), SolverError> {
    match raw.status {
        SolverStatus::Solved => Ok((SolveStatus::Optimal, false)),
        SolverStatus::AlmostSolved => Ok((SolveStatus::Optimal, true)),
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            Err(SolverError::Infeasible)
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            Ok((SolveStatus::Unbounded, false))
        }
        SolverStatus::MaxIterations if raw.kkt.max() <= ACCEPT_RESIDUAL => {
            Ok((SolveStatus::MaxIter, true))
        }
        other => Err(SolverError::NumericalFailure(format!("{other:?}"))),
    }
}

/// Weighted residual sum of squares `(A - Z beta)' V (A - Z beta)`.
pub fn wls_objective(
    a: &DVector<f64>,
    z: &DMatrix<f64>,
    v: &DVector<f64>,
    beta: &DVector<f64>,
) -> f64 {
    let r = a - z * beta;
    r.iter().zip(v.iter()).map(|(e, w)| w * e * e).sum()
}

/// Systems with no constraint or a single ℓ2 restriction at the origin are
/// solved without the conic solver.
fn closed_form_bound(cs: &ConstraintSystem) -> Option<L2Bound> {
    if cs.offset.iter().any(|x| *x != 0.0) {
        return None;
    }
    match (cs.eqs.as_slice(), cs.ineqs.as_slice()) {
        ([], []) => Some(L2Bound::Free),
        ([], [c]) => match c.kind {
            IneqKind::L2Ball { radius } => Some(L2Bound::Ball(radius + c.rhs)),
            _ => None,
        },
        ([e], []) => match e.kind {
            EqKind::L2Sphere { radius } => Some(L2Bound::Sphere(radius + e.rhs)),
            _ => None,
        },
        _ => None,
    }
}

/// `sum(w) = s` together with `|w| <= r` leaves only the uniform weights
/// when `r = s / sqrt(J)`, and nothing when `r` is smaller.
fn pinned_weights(cs: &ConstraintSystem) -> Result<Option<DVector<f64>>, SolverError> {
    if cs.j == 0 || cs.offset.iter().any(|x| *x != 0.0) {
        return Ok(None);
    }
    let total = cs.eqs.iter().find_map(|e| match e.kind {
        EqKind::Sum { target } => Some(target + e.rhs),
        _ => None,
    });
    let radius = cs
        .ineqs
        .iter()
        .filter_map(|c| match c.kind {
            IneqKind::L2Ball { radius } => Some(radius + c.rhs),
            _ => None,
        })
        .fold(f64::INFINITY, f64::min);
    let Some(total) = total.filter(|_| radius.is_finite()) else {
        return Ok(None);
    };
    let floor = total.abs() / (cs.j as f64).sqrt();
    if radius < floor * (1.0 - 1e-9) {
        return Err(SolverError::Infeasible);
    }
    if radius > floor * (1.0 + 1e-9) {
        return Ok(None);
    }
    Ok(Some(DVector::from_element(cs.j, total / cs.j as f64)))
}

/// Minimize `(A - Bw - Cr)' V (A - Bw - Cr)` over the set described by `cs`.
pub fn solve_wls(
    a: &DVector<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    v: &DVector<f64>,
    cs: &ConstraintSystem,
) -> Result<Solution, SolverError> {
    let n = a.len();
    let (j, kc) = (b.ncols(), c.ncols());
    let d = j + kc;
    if b.nrows() != n || c.nrows() != n || v.len() != n {
        return Err(SolverError::Dimension("A, B, C and V need equal row counts".into()));
    }
    if cs.j != j || cs.d != d {
        return Err(SolverError::Dimension(format!(
            "constraint system is for J={}, d={}, data has J={j}, d={d}",
            cs.j, cs.d
        )));
    }
    if let Some(bound) = closed_form_bound(cs) {
        return solve_profiled(a, b, c, v, bound);
    }
    let z = linalg::hstack(n, &[b, c]);
    if let Some(w) = pinned_weights(cs)? {
        let r = if kc == 0 {
            DVector::zeros(0)
        } else {
            linalg::lstsq(c, &(a - b * &w), Some(v)).coef
        };
        let beta = DVector::from_iterator(d, w.iter().chain(r.iter()).copied());
        return Ok(Solution {
            objective: wls_objective(a, &z, v, &beta),
            x: beta,
            status: SolveStatus::Optimal,
            kkt: KktResiduals::default(),
            iterations: 0,
            reduced_accuracy: false,
            degenerate: false,
        });
    }
    let sphere = cs.eqs.iter().find_map(|e| match e.kind {
        EqKind::L2Sphere { radius } => Some(radius + e.rhs),
        _ => None,
    });

    let col_scale = DVector::from_fn(d, |k, _| {
        let s: f64 = (0..n).map(|i| v[i] * z[(i, k)] * z[(i, k)]).sum::<f64>().sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    });
    let a_norm = {
        let s: f64 = a.iter().zip(v.iter()).map(|(x, w)| w * x * x).sum::<f64>().sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let mu = col_scale.map(|s| a_norm / s);
    let mut zs = z.clone();
    for k in 0..d {
        zs.column_mut(k).scale_mut(1.0 / col_scale[k]);
    }
    // Epigraph form: minimize t subject to t >= ||V^1/2 (A~ - Z~ y)||. With
    // X = V^1/2 Z~ = QR the residual norm is ||(Q'a - R y, ||a - QQ'a||)||,
    // and a duality gap of TOL in t bounds the squared-loss gap by ~TOL^2.
    let sw = v.map(f64::sqrt);
    let mut x = zs;
    for (i, s) in sw.iter().enumerate() {
        x.row_mut(i).scale_mut(*s);
    }
    let aw = a.component_mul(&sw) / a_norm;
    let degenerate = linalg::rank(&x) < d;
    let qr = x.qr();
    let (qm, rm) = (qr.q(), qr.r());
    let qa = qm.transpose() * &aw;
    let outside = (&aw - &qm * &qa).norm();

    let mut conic = Conic::new(d);
    let t = conic.add_vars(1);
    let mut soc: Vec<Row> = Vec::with_capacity(rm.nrows() + 2);
    soc.push((vec![(t, -1.0)], 0.0));
    for (k, row) in rm.row_iter().enumerate() {
        soc.push(((0..d).map(|c| (c, row[c])).collect(), qa[k]));
    }
    soc.push((Vec::new(), outside));
    conic.push(soc, SupportedConeT::SecondOrderConeT);
    conic.add_system(cs, &mu);
    let p = CscMatrix::zeros((conic.nvar, conic.nvar));
    let mut q = vec![0.0; conic.nvar];
    q[t] = 1.0;
    let raw = run_clarabel(&p, &q, &conic)?;
    let (status, reduced) = classify(&raw)?;
    if status == SolveStatus::Unbounded {
        return Err(SolverError::NumericalFailure("objective reported unbounded".into()));
    }
    let beta = DVector::from_fn(d, |k, _| cs.offset[k] + mu[k] * raw.y[k]);
    let ineq_solution = Solution {
        objective: wls_objective(a, &z, v, &beta),
        x: beta,
        status,
        kkt: raw.kkt,
        iterations: raw.iterations,
        reduced_accuracy: reduced,
        degenerate,
    };
    match sphere {
        Some(radius) => {
            let w_norm = ineq_solution.x.rows(0, j).norm();
            if w_norm >= radius - 1e-7 * radius.max(1.0) {
                Ok(ineq_solution)
            } else {
                solve_profiled(a, b, c, v, L2Bound::Sphere(radius))
            }
        }
        None => Ok(ineq_solution),
    }
}

/// Norm restriction handled in closed form by [`solve_profiled`].
#[derive(Debug, Clone, Copy, PartialEq)]
enum L2Bound {
    Free,
    Ball(f64),
    Sphere(f64),
}

/// Weighted least squares with at most one ℓ2 restriction on `w` and `r`
/// free. Profiles out `r`, diagonalizes the reduced normal equations and, if
/// the restriction binds, bisects on the multiplier `lambda` of
/// `(H + lambda I) w = h` until `||w|| = radius`. Rank-deficient directions
/// get the minimum-norm solution.
fn solve_profiled(
    a: &DVector<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    v: &DVector<f64>,
    bound: L2Bound,
) -> Result<Solution, SolverError> {
    let n = a.len();
    let j = b.ncols();
    let sw = v.map(f64::sqrt);
    let scale_rows = |m: &DMatrix<f64>| {
        let mut m = m.clone();
        for (i, s) in sw.iter().enumerate() {
            m.row_mut(i).scale_mut(*s);
        }
        m
    };
    let (aw, bw, cw) = (a.component_mul(&sw), scale_rows(b), scale_rows(c));
    let cpinv = linalg::pinv(&cw);
    let annihilate = |m: &DMatrix<f64>| m - &cw * (&cpinv * m);
    let bbar = annihilate(&bw);
    let abar = {
        let am = DMatrix::from_column_slice(n, 1, aw.as_slice());
        annihilate(&am).column(0).into_owned()
    };
    let h = bbar.transpose() * &bbar;
    let hv = bbar.transpose() * &abar;
    let eig = SymmetricEigen::new(h.clone());
    let alpha = eig.eigenvectors.transpose() * &hv;
    let mu_min = eig.eigenvalues.min();
    let mu_max = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
    let w_at = |lambda: f64| -> DVector<f64> {
        let coef = DVector::from_fn(j, |k, _| {
            let den = eig.eigenvalues[k] + lambda;
            if den.abs() <= 1e-14 * mu_max {
                0.0
            } else {
                alpha[k] / den
            }
        });
        &eig.eigenvectors * coef
    };

    let near_min: Vec<usize> = (0..j)
        .filter(|k| eig.eigenvalues[*k] - mu_min <= 1e-12 * mu_max)
        .collect();
    let hv_norm = hv.norm().max(f64::MIN_POSITIVE);
    let hard = near_min.iter().all(|k| alpha[*k].abs() <= 1e-10 * hv_norm);

    let w_free = w_at(0.0);
    let rank_deficient = mu_min <= 1e-12 * mu_max;
    let (radius, on_boundary) = match bound {
        L2Bound::Free => (f64::INFINITY, false),
        L2Bound::Ball(r) => (r, w_free.norm() > r),
        L2Bound::Sphere(r) => (r, true),
    };
    let mut lambda = 0.0;
    let mut w = w_free;
    let mut degenerate = rank_deficient;
    if on_boundary {
        w = w_at(-mu_min);
        if hard && w.norm() <= radius {
            // Hard case: move along a bottom eigenvector to reach the sphere.
            lambda = -mu_min;
            let u = eig.eigenvectors.column(near_min[0]).into_owned();
            let t = (radius * radius - w.norm_squared()).max(0.0).sqrt();
            w += u * t;
            degenerate = true;
        } else {
            // `||w(lambda)||` decreases on (-mu_min, inf).
            let (mut lo, mut hi) = (-mu_min, 0.0_f64.max(-mu_min));
            let mut step = mu_max.max(1.0);
            while w_at(hi).norm() > radius {
                lo = hi;
                hi += step;
                step *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if w_at(mid).norm() > radius {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lambda = 0.5 * (lo + hi);
            w = w_at(lambda);
            degenerate = false;
            // Remove the residual bisection error in the norm.
            let nw = w.norm();
            if nw > 0.0 {
                w *= radius / nw;
            }
        }
    }
    let r = &cpinv * (&aw - &bw * &w);
    let beta = DVector::from_iterator(j + c.ncols(), w.iter().chain(r.iter()).copied());
    let stationarity = (&h * &w + &w * lambda - &hv).amax() / hv_norm.max(1.0);
    let z = linalg::hstack(n, &[b, c]);
    Ok(Solution {
        objective: wls_objective(a, &z, v, &beta),
        x: beta,
        status: SolveStatus::Optimal,
        kkt: KktResiduals {
            primal: if on_boundary { (w.norm() - radius).abs() } else { 0.0 },
            dual: stationarity,
            complementarity: 0.0,
        },
        iterations: 0,
        reduced_accuracy: false,
        degenerate,
    })
}

/// Level-set problems sharing `Q` and the localized constraint set: the
/// factorization of `Q` is computed once and reused for every draw.
#[derive(Debug, Clone)]
pub struct LevelSet {
    scale: DVector<f64>,
    /// `R` with `R'R = S^-1 Q S^-1`, zero directions dropped.
    factor: DMatrix<f64>,
    /// Kept eigenvectors (columns) and square roots of their eigenvalues.
    basis: DMatrix<f64>,
    root: DVector<f64>,
    q_definite: bool,
    cs: ConstraintSystem,
}

impl LevelSet {
    pub fn new(qhat: &DMatrix<f64>, cs: ConstraintSystem) -> Self {
        let d = qhat.nrows();
        assert_eq!(d, cs.d, "Q and constraint system disagree on d");
        let scale = DVector::from_fn(d, |k, _| {
            let s = qhat[(k, k)].max(0.0).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        let qs = DMatrix::from_fn(d, d, |r, c| qhat[(r, c)] / (scale[r] * scale[c]));
        let eig = SymmetricEigen::new((&qs + qs.transpose()) * 0.5);
        let top = eig.eigenvalues.max().max(0.0);
        let keep: Vec<usize> = (0..d)
            .filter(|k| eig.eigenvalues[*k] > 1e-13 * top.max(f64::MIN_POSITIVE))
            .collect();
        let factor = DMatrix::from_fn(keep.len(), d, |r, c| {
            eig.eigenvalues[keep[r]].sqrt() * eig.eigenvectors[(c, keep[r])]
        });
        let basis = DMatrix::from_fn(d, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
        let root = DVector::from_fn(keep.len(), |k, _| eig.eigenvalues[keep[k]].sqrt());
        Self {
            scale,
            q_definite: keep.len() == d,
            factor,
            basis,
            root,
            cs,
        }
    }

    pub fn system(&self) -> &ConstraintSystem {
        &self.cs
    }

    /// Optimize `c' delta` over `delta' Q delta - 2 G' delta <= 0` within the
    /// constraint set.
    pub fn solve(
        &self,
        c: &DVector<f64>,
        g: &DVector<f64>,
        sense: Sense,
    ) -> Result<Solution, SolverError> {
        let d = self.scale.len();
        if c.len() != d || g.len() != d {
            return Err(SolverError::Dimension(format!(
                "level set has d={d}, got c of {} and G of {}",
                c.len(),
                g.len()
            )));
        }
        if c.iter().all(|x| *x == 0.0) {
            return Ok(origin(d));
        }
        let gs = g.component_div(&self.scale);
        let mut gamma = gs.norm();
        if gamma == 0.0 {
            if self.q_definite {
                return Ok(origin(d));
            }
            gamma = 1.0;
        }
        let ghat = &gs / gamma;
        let mu = self.scale.map(|s| gamma / s);
        let cc = c.component_mul(&mu);
        let kappa = cc.amax();
        let sign = sense_sign(sense);

        let mut conic = Conic::new(d);
        let mut soc: Vec<Row> = Vec::with_capacity(self.factor.nrows() + 2);
        let gcoef = |f: f64| (0..d).map(|k| (k, f * ghat[k])).collect::<Vec<_>>();
        soc.push((gcoef(-2.0), 1.0));
        for row in self.factor.row_iter() {
            soc.push(((0..d).map(|k| (k, -2.0 * row[k])).collect(), 0.0));
        }
        soc.push((gcoef(-2.0), -1.0));
        conic.push(soc, SupportedConeT::SecondOrderConeT);
        conic.add_system(&self.cs, &mu);
        if conic.pin_free_columns().iter().any(|&k| cc[k] != 0.0) {
            return Ok(unbounded(self, d, sign));
        }

        let p = CscMatrix::zeros((conic.nvar, conic.nvar));
        let mut q = vec![0.0; conic.nvar];
        for k in 0..d {
            q[k] = sign * cc[k] / kappa;
        }
        let raw = run_clarabel(&p, &q, &conic)?;
        finish(self, c, &mu, &raw, sign)
    }
}

/// Largest share of `G` outside the range of `Q` (in scaled units) that the
/// workspace projects away; beyond it the generic path is used.
const RANGE_TOL: f64 = 1e-9;

impl LevelSet {
    /// A reusable solver for many `(c, G)` pairs with `G ~ N(0, sigma)`;
    /// `sigma` only fixes the variable scaling.
    pub fn workspace(&self, sigma: &DMatrix<f64>) -> Result<LevelSetWorkspace<'_>, SolverError> {
        let g_size = (0..self.scale.len())
            .map(|k| sigma[(k, k)].max(0.0) / (self.scale[k] * self.scale[k]))
            .sum::<f64>()
            .sqrt();
        LevelSetWorkspace::new(self, g_size)
    }
}

/// Clarabel solver for one [`LevelSet`] whose constraint matrix is fixed.
///
/// With `S^-1 Q S^-1 = R'R` and `S^-1 G = gamma R'h`, the level set in
/// `y = S delta / gamma` is the ball `|R y - h| <= |h|`. `G` then enters
/// only the right-hand side, and the objective only the linear cost, so
/// both are updated in place between solves.
pub struct LevelSetWorkspace<'a> {
    level: &'a LevelSet,
    gamma: f64,
    mu: DVector<f64>,
    p: CscMatrix<f64>,
    a: CscMatrix<f64>,
    b: Vec<f64>,
    q: Vec<f64>,
    /// Coordinates left free by both the level set and the constraints.
    free: Vec<usize>,
    solver: DefaultSolver<f64>,
}

impl<'a> LevelSetWorkspace<'a> {
    fn new(level: &'a LevelSet, g_size: f64) -> Result<Self, SolverError> {
        let d = level.scale.len();
        let gamma = if g_size.is_finite() && g_size > 0.0 { g_size } else { 1.0 };
        let mu = level.scale.map(|s| gamma / s);
        let mut conic = Conic::new(d);
        if level.root.len() > 0 {
            let mut soc: Vec<Row> = vec![(Vec::new(), 0.0)];
            for row in level.factor.row_iter() {
                soc.push(((0..d).map(|k| (k, -row[k])).collect(), 0.0));
            }
            conic.push(soc, SupportedConeT::SecondOrderConeT);
        }
        conic.add_system(&level.cs, &mu);
        let free = conic.pin_free_columns();
        let p = CscMatrix::zeros((conic.nvar, conic.nvar));
        let a = conic.matrix();
        let q = vec![0.0; conic.nvar];
        let solver = DefaultSolver::new(&p, &q, &a, &conic.b, &conic.cones, settings(true)?)
            .map_err(|e| SolverError::Dimension(format!("{e:?}")))?;
        Ok(Self {
            level,
            gamma,
            mu,
            p,
            a,
            b: conic.b,
            q,
            free,
            solver,
        })
    }

    /// Same problem as [`LevelSet::solve`].
    pub fn solve(
        &mut self,
        c: &DVector<f64>,
        g: &DVector<f64>,
        sense: Sense,
    ) -> Result<Solution, SolverError> {
        let lv = self.level;
        let d = lv.scale.len();
        if c.len() != d || g.len() != d {
            return lv.solve(c, g, sense);
        }
        if c.iter().all(|x| *x == 0.0) || (lv.q_definite && g.iter().all(|x| *x == 0.0)) {
            return Ok(origin(d));
        }
        let ghat = g.component_div(&lv.scale) / self.gamma;
        let coords = lv.basis.tr_mul(&ghat);
        let outside = (&ghat - &lv.basis * &coords).norm();
        if outside > RANGE_TOL * ghat.norm() {
            return lv.solve(c, g, sense);
        }
        let h = coords.component_div(&lv.root);
        if !h.is_empty() {
            self.b[0] = h.norm();
            for (k, hk) in h.iter().enumerate() {
                self.b[1 + k] = -hk;
            }
        }
        let cc = c.component_mul(&self.mu);
        let kappa = cc.amax();
        let sign = sense_sign(sense);
        if self.free.iter().any(|&k| cc[k] != 0.0) {
            return Ok(unbounded(lv, d, sign));
        }
        for k in 0..d {
            self.q[k] = sign * cc[k] / kappa;
        }
        self.solver
            .update_b(&self.b)
            .and_then(|_| self.solver.update_q(&self.q))
            .map_err(|e| SolverError::NumericalFailure(e.to_string()))?;
        self.solver.solve();
        let raw = raw_solve(&self.solver, &self.p, &self.q, &self.a, &self.b);
        finish(lv, c, &self.mu, &raw, sign)
    }
}

fn sense_sign(sense: Sense) -> f64 {
    match sense {
        Sense::Min => 1.0,
        Sense::Max => -1.0,
    }
}

fn origin(d: usize) -> Solution {
    Solution {
        x: DVector::zeros(d),
        objective: 0.0,
        status: SolveStatus::Optimal,
        kkt: KktResiduals::default(),
        iterations: 0,
        reduced_accuracy: false,
        degenerate: false,
    }
}

fn unbounded(lv: &LevelSet, d: usize, sign: f64) -> Solution {
    Solution {
        x: DVector::zeros(d),
        objective: -sign * f64::INFINITY,
        status: SolveStatus::Unbounded,
        kkt: KktResiduals::default(),
        iterations: 0,
        reduced_accuracy: false,
        degenerate: !lv.q_definite,
    }
}

/// Map a scaled level-set solve back to `delta`.
fn finish(
    lv: &LevelSet,
    c: &DVector<f64>,
    mu: &DVector<f64>,
    raw: &RawSolve,
    sign: f64,
) -> Result<Solution, SolverError> {
    let d = mu.len();
    let (status, reduced) = classify(raw)?;
    let delta = if status == SolveStatus::Unbounded {
        DVector::zeros(d)
    } else {
        DVector::from_fn(d, |k, _| mu[k] * raw.y[k])
    };
    Ok(Solution {
        objective: if status == SolveStatus::Unbounded {
            -sign * f64::INFINITY
        } else {
            c.dot(&delta)
        },
        x: delta,
        status,
        kkt: raw.kkt,
        iterations: raw.iterations,
        reduced_accuracy: reduced,
        degenerate: !lv.q_definite,
    })
}

/// One-shot form of [`LevelSet::solve`].
pub fn solve_linear_over_level_set(
    c: &DVector<f64>,
    qhat: &DMatrix<f64>,
    g: &DVector<f64>,
    cs_delta: &ConstraintSystem,
    sense: Sense,
) -> Result<Solution, SolverError> {
    LevelSet::new(qhat, cs_delta.clone()).solve(c, g, sense)
}
