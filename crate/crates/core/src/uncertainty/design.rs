//! Regression designs for the residual models: polynomial terms and lags of
//! the selected donor series, covariates and intercepts.

/// One row per time index; `None` where the row is undefined (a needed lag
/// or difference falls before the sample, or a value is missing).
pub type Rows = Vec<Option<Vec<f64>>>;

/// Exponent multisets of total degree `1..=order` over `k` variables, in
/// graded lexicographic order. Degree 1 comes first, so the linear terms
/// are always the leading columns.
pub fn monomials(k: usize, order: usize) -> Vec<Vec<usize>> {
    fn extend(start: usize, k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            extend(i, k, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for deg in 1..=order {
        extend(0, k, deg, &mut Vec::with_capacity(deg), &mut out);
    }
    out
}

/// Donor-series terms per time index: the (optionally first-differenced)
/// series `x_t`, its fully interacted polynomial up to `order`, then
/// `x_{t-1} .. x_{t-lags}`.
pub fn series_terms(series: &[Option<Vec<f64>>], order: usize, lags: usize, diff: bool) -> Rows {
    let base: Rows = (0..series.len())
        .map(|t| {
            let cur = series[t].as_ref()?;
            if !diff {
                return Some(cur.clone());
            }
            let prev = series[t.checked_sub(1)?].as_ref()?;
            Some(cur.iter().zip(prev).map(|(a, b)| a - b).collect())
        })
        .collect();
    let k = series.iter().flatten().map(Vec::len).next().unwrap_or(0);
    let terms = monomials(k, order);
    (0..series.len())
        .map(|t| {
            let x = base[t].as_ref()?;
            let mut row: Vec<f64> = terms
                .iter()
                .map(|m| m.iter().map(|&i| x[i]).product())
                .collect();
            for lag in 1..=lags {
                row.extend_from_slice(base[t.checked_sub(lag)?].as_ref()?);
            }
            Some(row)
        })
        .collect()
}

/// Whether some column is a nonzero constant over all `rows`.
pub fn has_constant_column(rows: &[Vec<f64>]) -> bool {
    let Some(first) = rows.first() else {
        return false;
    };
    (0..first.len()).any(|k| first[k] != 0.0 && rows.iter().all(|r| r[k] == first[k]))
}
