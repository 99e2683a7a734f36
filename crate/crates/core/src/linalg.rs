//! Small dense linear-algebra and statistics helpers shared by the estimator
//! and the uncertainty routines.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Outcome of a (possibly weighted) least-squares regression.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coef: DVector<f64>,
    pub fitted: DVector<f64>,
    pub rank: usize,
}

impl LeastSquares {
    pub fn is_full_rank(&self) -> bool {
        self.rank == self.coef.len()
    }
}

/// Minimum-norm least squares of `y` on `x`, optionally with nonnegative row
/// weights. Singular values below `max(n, p) * eps * s_max` are treated as zero.
pub fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>, weights: Option<&DVector<f64>>) -> LeastSquares {
    let (n, p) = x.shape();
    assert_eq!(n, y.len(), "row mismatch in lstsq");
    if p == 0 {
        return LeastSquares {
            coef: DVector::zeros(0),
            fitted: DVector::zeros(n),
            rank: 0,
        };
    }
    let (xw, yw) = match weights {
        Some(w) => {
            let sw = w.map(f64::sqrt);
            let mut xw = x.clone();
            for (mut row, s) in xw.row_iter_mut().zip(sw.iter()) {
                row *= *s;
            }
            (xw, y.component_mul(&sw))
        }
        None => (x.clone(), y.clone()),
    };
    let svd = xw.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = (n.max(p) as f64) * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let coef = svd
        .solve(&yw, tol.max(f64::MIN_POSITIVE))
        .expect("svd computed with both factors");
    let fitted = x * &coef;
    LeastSquares { coef, fitted, rank }
}

/// Moore-Penrose pseudo-inverse with the same rank cut-off as [`lstsq`].
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = (r.max(c) as f64) * f64::EPSILON * smax;
    svd.pseudo_inverse(tol.max(f64::MIN_POSITIVE))
        .expect("svd computed with both factors")
}

/// Numerical rank from the singular values.
pub fn rank(m: &DMatrix<f64>) -> usize {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    let tol = (r.max(c) as f64) * f64::EPSILON * smax;
    sv.iter().filter(|s| **s > tol).count()
}

/// Symmetric square root factor `R` with `R R' = S`, negative eigenvalues
/// floored at zero. Also returns the smallest eigenvalue before flooring.
pub fn psd_factor(s: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = s.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0.0);
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min_eig = eig.eigenvalues.min();
    let mut f = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let root = lambda.max(0.0).sqrt();
        f.column_mut(j).scale_mut(root);
    }
    (f, min_eig)
}

/// Type-7 (linear interpolation) empirical quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    if frac == 0.0 || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Type-7 quantile of unsorted data; `NaN` entries must be removed by the caller.
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, prob)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample covariance with denominator `n - 1`.
pub fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(x), mean(y));
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - 1) as f64
}

pub fn sample_var(x: &[f64]) -> f64 {
    sample_cov(x, x)
}

pub fn sample_sd(x: &[f64]) -> f64 {
    sample_var(x).sqrt()
}

/// Select the listed columns of `m`, in order.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Horizontal concatenation; all blocks must share the row count `rows`.
pub fn hstack(rows: usize, blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, at), (rows, b.ncols())).copy_from(*b);
        at += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_matches_hand_values() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        // h = 3 * 0.1 = 0.3
        assert!((quantile(&v, 0.1) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn lstsq_recovers_exact_coefficients() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let ls = lstsq(&x, &y, None);
        assert!((ls.coef[0] - 1.0).abs() < 1e-12);
        assert!((ls.coef[1] - 2.0).abs() < 1e-12);
        assert_eq!(ls.rank, 2);
    }

    #[test]
    fn lstsq_minimum_norm_on_duplicate_columns() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0]);
        let ls = lstsq(&x, &y, None);
        assert_eq!(ls.rank, 1);
        assert!((ls.coef[0] - 1.0).abs() < 1e-12 && (ls.coef[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psd_factor_floors_negative_eigenvalues() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-14]);
        let (f, min) = psd_factor(&s);
        assert!(min < 0.0);
        let back = &f * f.transpose();
        assert!((back[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(back[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn sample_moments() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((sample_var(&x) - 5.0 / 3.0).abs() < 1e-15);
        assert!((mean(&x) - 2.5).abs() < 1e-15);
    }
}
