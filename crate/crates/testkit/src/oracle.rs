//! Reference minimizers of `||A - B w - C r||^2` over simple weight sets.
//!
//! The covariate coefficients are profiled out by projecting onto the
//! orthogonal complement of `C`. The remaining problem in `w` is solved by
//! accelerated projected gradient from a grid of starting points, using
//! exact Euclidean projections onto each set.

use nalgebra::{DMatrix, DVector};

/// Feasible sets for the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSet {
    Free,
    /// `w >= 0, sum(w) = total`
    Simplex { total: f64 },
    /// `||w||_1 <= radius`
    L1Ball { radius: f64 },
    /// `||w||_2 <= radius`
    L2Ball { radius: f64 },
    /// Simplex intersected with `||w||_2 <= radius`.
    SimplexBall { total: f64, radius: f64 },
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub objective: f64,
    pub w: DVector<f64>,
}

/// Projection onto `{w >= 0, sum(w) = total}` by the sorting method.
pub fn project_simplex(v: &DVector<f64>, total: f64) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - total) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

fn project_l1(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    if v.lp_norm(1) <= radius {
        return v.clone();
    }
    let mag = project_simplex(&v.abs(), radius);
    DVector::from_fn(v.len(), |i, _| v[i].signum() * mag[i])
}

fn project_l2(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = v.norm();
    if n <= radius {
        v.clone()
    } else {
        v * (radius / n)
    }
}

/// Projection onto the simplex cut by a ball: minimizing
/// `|w - v|^2 + mu |w|^2` over the simplex gives `P(v / (1 + mu))`, and
/// `mu` is found by bisection on `|w| = radius`.
fn project_simplex_ball(v: &DVector<f64>, total: f64, radius: f64) -> DVector<f64> {
    let at = |mu: f64| project_simplex(&(v / (1.0 + mu)), total);
    let w0 = at(0.0);
    if w0.norm() <= radius {
        return w0;
    }
    let mut hi = 1.0;
    while at(hi).norm() > radius && hi < 1e12 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi)
}

pub fn project(set: WeightSet, v: &DVector<f64>) -> DVector<f64> {
    match set {
        WeightSet::Free => v.clone(),
        WeightSet::Simplex { total } => project_simplex(v, total),
        WeightSet::L1Ball { radius } => project_l1(v, radius),
        WeightSet::L2Ball { radius } => project_l2(v, radius),
        WeightSet::SimplexBall { total, radius } => project_simplex_ball(v, total, radius),
    }
}

/// `(M A, M B)` with `M` the residual maker of `C`.
pub fn profile_covariates(a: &DVector<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    if c.ncols() == 0 {
        return (a.clone(), b.clone());
    }
    let svd = c.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > tol).collect();
    let basis = DMatrix::from_fn(c.nrows(), keep.len(), |i, k| u[(i, keep[k])]);
    let resid = |m: &DMatrix<f64>| m - &basis * (basis.transpose() * m);
    let a_m = DMatrix::from_column_slice(a.len(), 1, a.as_slice());
    (resid(&a_m).column(0).into_owned(), resid(b))
}

fn objective(a: &DVector<f64>, b: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    (a - b * w).norm_squared()
}

/// Accelerated projected gradient from `start` until the iterates stall.
fn descend(a: &DVector<f64>, b: &DMatrix<f64>, set: WeightSet, start: DVector<f64>) -> DVector<f64> {
    let btb = b.transpose() * b;
    let bta = b.transpose() * a;
    let lip = 2.0 * btb.symmetric_eigenvalues().max().max(1e-12);
    let mut x = project(set, &start);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..100_000 {
        let grad = (&btb * &y - &bta) * 2.0;
        let next = project(set, &(&y - grad / lip));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        let step = (&next - &x).amax();
        x = next;
        t = t_next;
        if step < 1e-15 {
            break;
        }
    }
    x
}

/// Grid points on `[-s, s]^J` (or the set's natural box) with `steps`
/// intervals per axis, projected onto the set.
fn grid(j: usize, set: WeightSet, steps: usize) -> Vec<DVector<f64>> {
    let s = match set {
        WeightSet::Free => 2.0,
        WeightSet::Simplex { total } | WeightSet::SimplexBall { total, .. } => total,
        WeightSet::L1Ball { radius } | WeightSet::L2Ball { radius } => radius,
    };
    let n = steps + 1;
    let mut out = Vec::new();
    for idx in 0..n.pow(j as u32) {
        let mut k = idx;
        let v = DVector::from_fn(j, |_, _| {
            let c = k % n;
            k /= n;
            -s + 2.0 * s * c as f64 / steps as f64
        });
        out.push(project(set, &v));
    }
    out
}

/// Minimize `||A - B w - C r||^2` over `w in set`, `r` free.
pub fn minimize(a: &DVector<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, set: WeightSet) -> Reference {
    let (a, b) = profile_covariates(a, b, c);
    if set == WeightSet::Free {
        let w = b
            .clone()
            .svd(true, true)
            .solve(&a, 1e-12)
            .expect("svd with both factors");
        return Reference { objective: objective(&a, &b, &w), w };
    }
    let j = b.ncols();
    let mut starts = grid(j, set, if j <= 3 { 6 } else { 4 });
    starts.sort_by(|x, y| objective(&a, &b, x).total_cmp(&objective(&a, &b, y)));
    starts.truncate(8);
    starts.push(DVector::zeros(j));
    let mut best: Option<Reference> = None;
    for s in starts {
        let w = descend(&a, &b, set, s);
        let f = objective(&a, &b, &w);
        if best.as_ref().is_none_or(|r| f < r.objective) {
            best = Some(Reference { objective: f, w });
        }
    }
    best.expect("at least one start")
}
