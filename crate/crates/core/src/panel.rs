//! Panel ingestion and construction of the stacked design system `A, B, C, P`.
//!
//! Input rows carry one record per `(unit, time)` with one column per
//! variable; internally every cell is a `(unit, time, variable)` triple.
//! Stacking is feature-major: all pre-periods of feature 1, then feature 2.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}: time value `{value}` is not an integer ordinal")]
    InvalidTime { row: usize, value: String },
    #[error("row {row}: column `{column}` has non-numeric value `{value}`")]
    InvalidValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate record for unit `{unit}`, time {time}, feature `{feature}`")]
    DuplicateKey {
        unit: String,
        time: i64,
        feature: String,
    },
    #[error("unit `{0}` does not appear in the data")]
    UnknownUnit(String),
    #[error("{0} period set is empty")]
    EmptyPeriodSet(&'static str),
    #[error("donor pool is empty")]
    EmptyDonorPool,
    #[error("treated unit `{0}` is also listed as a donor")]
    TreatedInDonors(String),
    #[error("donor `{0}` is listed twice")]
    DuplicateDonor(String),
    #[error("period {0} is declared both pre- and post-treatment")]
    PeriodOverlap(i64),
    #[error("every pre-treatment period must precede every post-treatment period")]
    PeriodOrder,
    #[error("no features declared")]
    NoFeatures,
    #[error("feature `{0}` has no observed value")]
    FeatureAllMissing(String),
    #[error("every pre-treatment period has a missing entry")]
    AllPrePeriodsDropped,
    #[error("pre-treatment period {0} still has missing entries; apply the missing-data rules first")]
    MissingPreValues(i64),
    #[error("global constant requested together with a per-feature constant")]
    CollinearCovariates,
    #[error("covariate matrix C has linearly dependent columns (rank {rank} < {cols})")]
    RankDeficientC { rank: usize, cols: usize },
    #[error("covariate adjustment lists {got} feature blocks, expected {expected}")]
    CovAdjLength { expected: usize, got: usize },
    #[error("weight vector has length {got}, expected {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error("weights must be finite and nonnegative")]
    NegativeWeight,
}

/// Deterministic covariates available for adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    Constant,
    Trend,
}

impl Covariate {
    pub fn name(self) -> &'static str {
        match self {
            Covariate::Constant => "constant",
            Covariate::Trend => "trend",
        }
    }
}

/// Covariate adjustment grammar: nothing, one list replicated over all
/// features, or one list per feature (aligned with the feature order).
#[derive(Debug, Clone, Default, PartialEq)]
pub enum CovariateAdjustment {
    #[default]
    None,
    Shared(Vec<Covariate>),
    PerFeature(Vec<Vec<Covariate>>),
}

/// Declared roles of units and periods.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelMeta {
    pub treated: String,
    pub donors: Vec<String>,
    /// Matched features, in stacking order. Must be nonempty.
    pub features: Vec<String>,
    /// Outcome variable used for prediction rows.
    pub outcome: String,
    pub pre: Vec<i64>,
    pub post: Vec<i64>,
}

impl PanelMeta {
    fn validate(&mut self) -> Result<(), PanelError> {
        if self.features.is_empty() {
            return Err(PanelError::NoFeatures);
        }
        if self.donors.is_empty() {
            return Err(PanelError::EmptyDonorPool);
        }
        let mut seen = BTreeSet::new();
        for d in &self.donors {
            if *d == self.treated {
                return Err(PanelError::TreatedInDonors(d.clone()));
            }
            if !seen.insert(d.as_str()) {
                return Err(PanelError::DuplicateDonor(d.clone()));
            }
        }
        if self.pre.is_empty() {
            return Err(PanelError::EmptyPeriodSet("pre-treatment"));
        }
        if self.post.is_empty() {
            return Err(PanelError::EmptyPeriodSet("post-treatment"));
        }
        self.pre.sort_unstable();
        self.pre.dedup();
        self.post.sort_unstable();
        self.post.dedup();
        if let Some(t) = self.pre.iter().find(|t| self.post.binary_search(t).is_ok()) {
            return Err(PanelError::PeriodOverlap(*t));
        }
        if self.pre.last() >= self.post.first() {
            return Err(PanelError::PeriodOrder);
        }
        Ok(())
    }

    /// Features followed by the outcome when it is not itself a feature.
    fn variables(&self) -> Vec<String> {
        let mut v = self.features.clone();
        if !v.contains(&self.outcome) {
            v.push(self.outcome.clone());
        }
        v
    }
}

/// Column mapping for [`load_panel`].
#[derive(Debug, Clone)]
pub struct PanelSchema {
    pub id_var: String,
    pub time_var: String,
    pub outcome_var: String,
    /// Defaults to the outcome alone when empty.
    pub features: Vec<String>,
    pub unit_tr: String,
    pub unit_co: Vec<String>,
    pub period_pre: Vec<i64>,
    pub period_post: Vec<i64>,
    pub delimiter: u8,
}

/// Validated panel keyed by `(unit, time, variable)`. Unit 0 is the treated
/// unit, units `1..=J` are the donors in declared order.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    meta: PanelMeta,
    variables: Vec<String>,
    /// pre periods followed by post periods
    times: Vec<i64>,
    values: Vec<Option<f64>>,
}

impl PanelData {
    /// Build a panel from a value function. Missing cells are `None`.
    pub fn from_fn(
        mut meta: PanelMeta,
        mut f: impl FnMut(&str, i64, &str) -> Option<f64>,
    ) -> Result<Self, PanelError> {
        meta.validate()?;
        let variables = meta.variables();
        let times: Vec<i64> = meta.pre.iter().chain(&meta.post).copied().collect();
        let units: Vec<String> = std::iter::once(meta.treated.clone())
            .chain(meta.donors.iter().cloned())
            .collect();
        let mut values = Vec::with_capacity(units.len() * times.len() * variables.len());
        for u in &units {
            for t in &times {
                for v in &variables {
                    values.push(f(u, *t, v));
                }
            }
        }
        Ok(Self {
            meta,
            variables,
            times,
            values,
        })
    }

    pub fn meta(&self) -> &PanelMeta {
        &self.meta
    }

    pub fn treated(&self) -> &str {
        &self.meta.treated
    }

    pub fn donors(&self) -> &[String] {
        &self.meta.donors
    }

    pub fn features(&self) -> &[String] {
        &self.meta.features
    }

    pub fn outcome(&self) -> &str {
        &self.meta.outcome
    }

    pub fn pre_periods(&self) -> &[i64] {
        &self.meta.pre
    }

    pub fn post_periods(&self) -> &[i64] {
        &self.meta.post
    }

    pub fn j(&self) -> usize {
        self.meta.donors.len()
    }

    pub fn t0(&self) -> usize {
        self.meta.pre.len()
    }

    pub fn t1(&self) -> usize {
        self.meta.post.len()
    }

    pub fn m(&self) -> usize {
        self.meta.features.len()
    }

    fn index(&self, unit: usize, time_idx: usize, var: usize) -> usize {
        (unit * self.times.len() + time_idx) * self.variables.len() + var
    }

    fn var_index(&self, name: &str) -> usize {
        self.variables
            .iter()
            .position(|v| v == name)
            .expect("variable registered at construction")
    }

    /// Value of variable `var` for unit index `unit` (0 = treated) at `time`.
    pub fn value(&self, unit: usize, time: i64, var: &str) -> Option<f64> {
        let ti = self.times.iter().position(|t| *t == time)?;
        let vi = self.variables.iter().position(|v| v == var)?;
        self.values[self.index(unit, ti, vi)]
    }

    /// Long-format view `(unit, time, variable, value)`.
    pub fn records(&self) -> impl Iterator<Item = (&str, i64, &str, Option<f64>)> + '_ {
        let units = std::iter::once(&self.meta.treated).chain(&self.meta.donors);
        units.enumerate().flat_map(move |(u, name)| {
            self.times.iter().enumerate().flat_map(move |(ti, t)| {
                self.variables.iter().enumerate().map(move |(vi, v)| {
                    (name.as_str(), *t, v.as_str(), self.values[self.index(u, ti, vi)])
                })
            })
        })
    }

    fn unit_complete_at(&self, unit: usize, time_idx: usize) -> bool {
        (0..self.variables.len()).all(|v| self.values[self.index(unit, time_idx, v)].is_some())
    }
}

fn is_missing_marker(s: &str) -> bool {
    s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") || s == "."
}

/// Parse a delimited table with a header row into a [`PanelData`].
///
/// Records for undeclared units or periods are ignored. Empty cells and the
/// markers `NA`, `NaN` and `.` are missing values.
pub fn load_panel<R: Read>(source: R, schema: &PanelSchema) -> Result<PanelData, PanelError> {
    let features = if schema.features.is_empty() {
        vec![schema.outcome_var.clone()]
    } else {
        schema.features.clone()
    };
    let mut meta = PanelMeta {
        treated: schema.unit_tr.clone(),
        donors: schema.unit_co.clone(),
        features,
        outcome: schema.outcome_var.clone(),
        pre: schema.period_pre.clone(),
        post: schema.period_post.clone(),
    };
    meta.validate()?;
    let variables = meta.variables();

    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id_var)?;
    let time_col = col(&schema.time_var)?;
    let var_cols = variables
        .iter()
        .map(|v| col(v))
        .collect::<Result<Vec<_>, _>>()?;

    let unit_pos: HashMap<&str, usize> = std::iter::once(meta.treated.as_str())
        .chain(meta.donors.iter().map(String::as_str))
        .enumerate()
        .map(|(i, u)| (u, i))
        .collect();
    let times: Vec<i64> = meta.pre.iter().chain(&meta.post).copied().collect();
    let time_pos: HashMap<i64, usize> = times.iter().enumerate().map(|(i, t)| (*t, i)).collect();

    let n_cells = unit_pos.len() * times.len() * variables.len();
    let mut values: Vec<Option<f64>> = vec![None; n_cells];
    let mut seen = vec![false; unit_pos.len() * times.len()];
    let mut units_present = vec![false; unit_pos.len()];

    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let Some(&u) = unit_pos.get(rec.get(id_col).unwrap_or_default()) else {
            continue;
        };
        units_present[u] = true;
        let raw_t = rec.get(time_col).unwrap_or_default();
        let t: i64 = raw_t.parse().map_err(|_| PanelError::InvalidTime {
            row,
            value: raw_t.to_string(),
        })?;
        let Some(&ti) = time_pos.get(&t) else {
            continue;
        };
        let slot = u * times.len() + ti;
        if seen[slot] {
            let unit = if u == 0 {
                meta.treated.clone()
            } else {
                meta.donors[u - 1].clone()
            };
            return Err(PanelError::DuplicateKey {
                unit,
                time: t,
                feature: variables[0].clone(),
            });
        }
        seen[slot] = true;
        for (vi, &c) in var_cols.iter().enumerate() {
            let raw = rec.get(c).unwrap_or_default();
            let val = if is_missing_marker(raw) {
                None
            } else {
                let x: f64 = raw.parse().map_err(|_| PanelError::InvalidValue {
                    row,
                    column: variables[vi].clone(),
                    value: raw.to_string(),
                })?;
                x.is_finite().then_some(x)
            };
            values[slot * variables.len() + vi] = val;
        }
    }

    if let Some(u) = units_present.iter().position(|p| !p) {
        let name = if u == 0 {
            meta.treated.clone()
        } else {
            meta.donors[u - 1].clone()
        };
        return Err(PanelError::UnknownUnit(name));
    }
    let panel = PanelData {
        meta,
        variables,
        times,
        values,
    };
    for (vi, v) in panel.variables.iter().enumerate() {
        let observed = (0..panel.values.len() / panel.variables.len())
            .any(|cell| panel.values[cell * panel.variables.len() + vi].is_some());
        if !observed {
            return Err(PanelError::FeatureAllMissing(v.clone()));
        }
    }
    Ok(panel)
}

/// Actions taken by [`apply_missing_rules`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MissingReport {
    /// Pre-treatment periods removed because some unit had a missing entry.
    pub dropped_pre: Vec<i64>,
    /// Post-treatment periods where a donor outcome is missing: no prediction.
    pub unavailable_post: Vec<i64>,
    /// Post-treatment periods where the treated outcome is missing: no effect.
    pub treated_missing_post: Vec<i64>,
}

impl MissingReport {
    pub fn is_empty(&self) -> bool {
        self.dropped_pre.is_empty()
            && self.unavailable_post.is_empty()
            && self.treated_missing_post.is_empty()
    }
}

/// Drop incomplete pre-periods and record post-period gaps.
pub fn apply_missing_rules(p: PanelData) -> Result<(PanelData, MissingReport), PanelError> {
    let n_units = p.j() + 1;
    let t0 = p.t0();
    let mut report = MissingReport::default();
    let keep_pre: Vec<bool> = (0..t0)
        .map(|ti| (0..n_units).all(|u| p.unit_complete_at(u, ti)))
        .collect();
    for (ti, keep) in keep_pre.iter().enumerate() {
        if !keep {
            report.dropped_pre.push(p.times[ti]);
        }
    }
    if keep_pre.iter().all(|k| !k) {
        return Err(PanelError::AllPrePeriodsDropped);
    }
    let outcome = p.var_index(&p.meta.outcome);
    for (k, &t) in p.meta.post.iter().enumerate() {
        let ti = t0 + k;
        if (1..n_units).any(|u| p.values[p.index(u, ti, outcome)].is_none()) {
            report.unavailable_post.push(t);
        }
        if p.values[p.index(0, ti, outcome)].is_none() {
            report.treated_missing_post.push(t);
        }
    }
    if report.dropped_pre.is_empty() {
        return Ok((p, report));
    }
    let mut meta = p.meta.clone();
    meta.pre.retain(|t| !report.dropped_pre.contains(t));
    let cleaned = PanelData::from_fn(meta, |u, t, v| {
        let unit = if u == p.meta.treated {
            0
        } else {
            1 + p.meta.donors.iter().position(|d| d == u).expect("known donor")
        };
        p.value(unit, t, v)
    })?;
    Ok((cleaned, report))
}

/// Options for [`build_matrices`].
#[derive(Debug, Clone, Default)]
pub struct MatrixOptions {
    pub cov_adj: CovariateAdjustment,
    /// Adds a single column of ones across every stacked row.
    pub constant: bool,
    pub cointegrated: bool,
    /// Diagonal of `V`, one entry per stacked row; identity when absent.
    pub v: Option<Vec<f64>>,
}

/// The stacked design system and its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ScMatrices {
    /// `T0*M x 1` treated features.
    pub a: DVector<f64>,
    /// `T0*M x J` donor features.
    pub b: DMatrix<f64>,
    /// `T0*M x KM` covariates; the global constant, if any, is column 0.
    pub c: DMatrix<f64>,
    /// Prediction rows `(x_t', g_t')` for the available post periods.
    pub p: DMatrix<f64>,
    /// Diagonal of `V`.
    pub v: DVector<f64>,
    pub j: usize,
    pub m: usize,
    pub t0: usize,
    /// Number of declared post periods, available or not.
    pub t1: usize,
    pub cointegrated: bool,
    pub constant: bool,
    /// Resolved covariate list per feature block (excluding the global constant).
    pub cov_adj: Vec<Vec<Covariate>>,
    pub c_names: Vec<String>,
    pub treated: String,
    pub donors: Vec<String>,
    pub features: Vec<String>,
    pub outcome: String,
    pub pre_periods: Vec<i64>,
    pub post_periods: Vec<i64>,
    /// Row of `p` for each post period, `None` when a donor outcome is missing.
    pub p_rows: Vec<Option<usize>>,
    /// Treated outcome per post period.
    pub y_post: Vec<Option<f64>>,
    /// Treated outcome per retained pre period.
    pub y_pre: DVector<f64>,
    /// Prediction rows evaluated at the pre periods.
    pub p_pre: DMatrix<f64>,
}

impl ScMatrices {
    /// Number of covariate columns `KM`.
    pub fn kc(&self) -> usize {
        self.c.ncols()
    }

    pub fn d(&self) -> usize {
        self.j + self.c.ncols()
    }

    /// `Z = [B C]`.
    pub fn z(&self) -> DMatrix<f64> {
        linalg::hstack(self.a.len(), &[&self.b, &self.c])
    }

    pub fn v_is_identity(&self) -> bool {
        self.v.iter().all(|x| *x == 1.0)
    }

    /// Prediction row for post period index `k`.
    pub fn p_row(&self, k: usize) -> Option<DVector<f64>> {
        self.p_rows[k].map(|r| self.p.row(r).transpose())
    }

    /// Index of the feature block holding the outcome equation; the first
    /// feature when the outcome is not matched on.
    pub fn outcome_block(&self) -> usize {
        self.features
            .iter()
            .position(|f| *f == self.outcome)
            .unwrap_or(0)
    }

    /// Assemble a system directly from arrays. Periods are numbered `1..=T0`
    /// and `T0+1..=T0+T1`, every post period is available, feature 1 is the
    /// outcome and treated post outcomes are unknown.
    pub fn from_arrays(
        a: DVector<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        p: DMatrix<f64>,
        m: usize,
    ) -> Self {
        let rows = a.len();
        assert!(m >= 1 && rows % m == 0, "rows must be a multiple of M");
        assert_eq!(b.nrows(), rows);
        assert_eq!(c.nrows(), rows);
        assert_eq!(p.ncols(), b.ncols() + c.ncols());
        let t0 = rows / m;
        let j = b.ncols();
        let t1 = p.nrows();
        let p_pre = linalg::hstack(
            t0,
            &[
                &b.rows(0, t0).into_owned(),
                &c.rows(0, t0).into_owned(),
            ],
        );
        Self {
            y_pre: a.rows(0, t0).into_owned(),
            v: DVector::from_element(rows, 1.0),
            j,
            m,
            t0,
            t1,
            cointegrated: false,
            constant: false,
            cov_adj: vec![Vec::new(); m],
            c_names: (0..c.ncols()).map(|k| format!("c{}", k + 1)).collect(),
            treated: "treated".into(),
            donors: (0..j).map(|k| format!("donor{}", k + 1)).collect(),
            features: (0..m).map(|k| format!("feature{}", k + 1)).collect(),
            outcome: "feature1".into(),
            pre_periods: (1..=t0 as i64).collect(),
            post_periods: (t0 as i64 + 1..=(t0 + t1) as i64).collect(),
            p_rows: (0..t1).map(Some).collect(),
            y_post: vec![None; t1],
            p_pre,
            a,
            b,
            c,
            p,
        }
    }

    /// Rebuild a panel carrying exactly the values that enter the system.
    pub fn to_panel(&self) -> PanelData {
        let meta = PanelMeta {
            treated: self.treated.clone(),
            donors: self.donors.clone(),
            features: self.features.clone(),
            outcome: self.outcome.clone(),
            pre: self.pre_periods.clone(),
            post: self.post_periods.clone(),
        };
        let unit_of = |u: &str| -> usize {
            if u == self.treated {
                0
            } else {
                1 + self.donors.iter().position(|d| d == u).expect("known donor")
            }
        };
        PanelData::from_fn(meta, |u, t, v| {
            let unit = unit_of(u);
            if let Some(i) = self.pre_periods.iter().position(|s| *s == t) {
                if let Some(l) = self.features.iter().position(|f| f == v) {
                    let row = l * self.t0 + i;
                    return Some(if unit == 0 {
                        self.a[row]
                    } else {
                        self.b[(row, unit - 1)]
                    });
                }
                return Some(if unit == 0 {
                    self.y_pre[i]
                } else {
                    self.p_pre[(i, unit - 1)]
                });
            }
            let k = self.post_periods.iter().position(|s| *s == t)?;
            if v != self.outcome {
                return None;
            }
            if unit == 0 {
                self.y_post[k]
            } else {
                self.p_rows[k].map(|r| self.p[(r, unit - 1)])
            }
        })
        .expect("metadata was validated when the system was built")
    }

    /// Dump `A`, `B`, `C` and `P` as CSV files with 17 significant digits.
    pub fn write_debug_csv(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let a = DMatrix::from_column_slice(self.a.len(), 1, self.a.as_slice());
        for (name, m) in [("A", &a), ("B", &self.b), ("C", &self.c), ("P", &self.p)] {
            let mut s = String::new();
            for row in m.row_iter() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
                let _ = writeln!(s, "{}", cells.join(","));
            }
            std::fs::write(dir.join(format!("{name}.csv")), s)?;
        }
        Ok(())
    }
}

/// Construct `A, B, C, P, V` from a panel whose pre-periods are complete.
pub fn build_matrices(p: &PanelData, opts: &MatrixOptions) -> Result<ScMatrices, PanelError> {
    let meta = &p.meta;
    let (j, m, t0, t1) = (p.j(), p.m(), p.t0(), p.t1());
    for (ti, &t) in meta.pre.iter().enumerate() {
        if !(0..=j).all(|u| p.unit_complete_at(u, ti)) {
            return Err(PanelError::MissingPreValues(t));
        }
    }

    let cov_adj: Vec<Vec<Covariate>> = match &opts.cov_adj {
        CovariateAdjustment::None => vec![Vec::new(); m],
        CovariateAdjustment::Shared(list) => vec![list.clone(); m],
        CovariateAdjustment::PerFeature(lists) => {
            if lists.len() != m {
                return Err(PanelError::CovAdjLength {
                    expected: m,
                    got: lists.len(),
                });
            }
            lists.clone()
        }
    };
    if opts.constant && cov_adj.iter().flatten().any(|c| *c == Covariate::Constant) {
        return Err(PanelError::CollinearCovariates);
    }

    let rows = t0 * m;
    let feature_idx: Vec<usize> = meta.features.iter().map(|f| p.var_index(f)).collect();
    let outcome_idx = p.var_index(&meta.outcome);
    let at = |unit: usize, ti: usize, var: usize| -> f64 {
        p.values[p.index(unit, ti, var)].expect("complete cell")
    };

    let mut a = DVector::zeros(rows);
    let mut b = DMatrix::zeros(rows, j);
    for (l, &vi) in feature_idx.iter().enumerate() {
        for ti in 0..t0 {
            let r = l * t0 + ti;
            a[r] = at(0, ti, vi);
            for u in 0..j {
                b[(r, u)] = at(u + 1, ti, vi);
            }
        }
    }

    let first_pre = meta.pre[0];
    let trend = |t: i64| (t - first_pre + 1) as f64;
    let covariate_value = |cov: Covariate, t: i64| match cov {
        Covariate::Constant => 1.0,
        Covariate::Trend => trend(t),
    };

    // Column layout: optional global constant, then per-feature blocks.
    let mut c_names = Vec::new();
    let mut c_cols: Vec<(Option<usize>, Covariate)> = Vec::new();
    if opts.constant {
        c_names.push("constant".to_string());
        c_cols.push((None, Covariate::Constant));
    }
    for (l, list) in cov_adj.iter().enumerate() {
        for cov in list {
            c_names.push(format!("{}.{}", meta.features[l], cov.name()));
            c_cols.push((Some(l), *cov));
        }
    }
    let mut c = DMatrix::zeros(rows, c_cols.len());
    for (k, (block, cov)) in c_cols.iter().enumerate() {
        for l in 0..m {
            if block.is_some_and(|b| b != l) {
                continue;
            }
            for (ti, &t) in meta.pre.iter().enumerate() {
                c[(l * t0 + ti, k)] = covariate_value(*cov, t);
            }
        }
    }
    let rank = linalg::rank(&c);
    if rank < c.ncols() {
        return Err(PanelError::RankDeficientC {
            rank,
            cols: c.ncols(),
        });
    }

    // Covariates enter prediction rows only through the outcome's own block.
    let outcome_block = meta.features.iter().position(|f| *f == meta.outcome);
    let g_row = |t: i64| -> Vec<f64> {
        c_cols
            .iter()
            .map(|(block, cov)| match block {
                None => 1.0,
                Some(l) if Some(*l) == outcome_block => covariate_value(*cov, t),
                Some(_) => 0.0,
            })
            .collect()
    };

    let mut p_pre = DMatrix::zeros(t0, j + c_cols.len());
    let mut y_pre = DVector::zeros(t0);
    for (ti, &t) in meta.pre.iter().enumerate() {
        y_pre[ti] = at(0, ti, outcome_idx);
        for u in 0..j {
            p_pre[(ti, u)] = at(u + 1, ti, outcome_idx);
        }
        for (k, g) in g_row(t).into_iter().enumerate() {
            p_pre[(ti, j + k)] = g;
        }
    }

    let mut p_data: Vec<Vec<f64>> = Vec::new();
    let mut p_rows = Vec::with_capacity(t1);
    let mut y_post = Vec::with_capacity(t1);
    for (k, &t) in meta.post.iter().enumerate() {
        let ti = t0 + k;
        y_post.push(p.values[p.index(0, ti, outcome_idx)]);
        let x: Option<Vec<f64>> = (1..=j)
            .map(|u| p.values[p.index(u, ti, outcome_idx)])
            .collect();
        match x {
            Some(mut row) => {
                row.extend(g_row(t));
                p_rows.push(Some(p_data.len()));
                p_data.push(row);
            }
            None => p_rows.push(None),
        }
    }
    let d = j + c_cols.len();
    let p_mat = DMatrix::from_fn(p_data.len(), d, |r, k| p_data[r][k]);

    let v = match &opts.v {
        None => DVector::from_element(rows, 1.0),
        Some(w) => {
            if w.len() != rows {
                return Err(PanelError::WeightLength {
                    expected: rows,
                    got: w.len(),
                });
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(PanelError::NegativeWeight);
            }
            DVector::from_column_slice(w)
        }
    };

    Ok(ScMatrices {
        a,
        b,
        c,
        p: p_mat,
        v,
        j,
        m,
        t0,
        t1,
        cointegrated: opts.cointegrated,
        constant: opts.constant,
        cov_adj,
        c_names,
        treated: meta.treated.clone(),
        donors: meta.donors.clone(),
        features: meta.features.clone(),
        outcome: meta.outcome.clone(),
        pre_periods: meta.pre.clone(),
        post_periods: meta.post.clone(),
        p_rows,
        y_post,
        y_pre,
        p_pre,
    })
}
