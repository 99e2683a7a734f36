//! Feasibility sets `W x R` for the weights and their explicit constraint
//! functions `m_eq`, `m_in`.
//!
//! Covariate coefficients `r` are never constrained; every constraint acts on
//! the first `J` coordinates of `beta = (w', r')'`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coordinates with `|w_j|` at or below this are treated as zero by the
/// ℓ1 subgradient.
pub const ZERO_WEIGHT_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("inconsistent constraint options: {0}")]
    InconsistentSpec(String),
    #[error("constraint size Q is required for norm {0}")]
    MissingQ(&'static str),
    #[error("constraint size Q2 is required for the L1-L2 norm")]
    MissingQ2,
    #[error("unknown constraint name `{0}`")]
    UnknownName(String),
    #[error("unknown value `{value}` for option `{option}`")]
    UnknownValue { option: &'static str, value: String },
    #[error("{0} must be a positive finite number")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "no norm")]
    None,
    L1,
    L2,
    #[serde(rename = "L1-L2")]
    L1L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==/<=")]
    EqLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LowerBound {
    Zero,
    NegInf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "ols")]
    Ols,
    #[serde(rename = "simplex")]
    Simplex,
    #[serde(rename = "lasso")]
    Lasso,
    #[serde(rename = "ridge")]
    Ridge,
    #[serde(rename = "L1-L2")]
    L1L2,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self, ConstraintError> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(Preset::Ols),
            "simplex" => Ok(Preset::Simplex),
            "lasso" => Ok(Preset::Lasso),
            "ridge" => Ok(Preset::Ridge),
            "l1-l2" => Ok(Preset::L1L2),
            _ => Err(ConstraintError::UnknownName(s.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Ols => "ols",
            Preset::Simplex => "simplex",
            Preset::Lasso => "lasso",
            Preset::Ridge => "ridge",
            Preset::L1L2 => "L1-L2",
        }
    }
}

/// Lower bound as written by a user: a number (`0`, `-inf`) or a string
/// (`"-Inf"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawBound {
    Number(f64),
    Text(String),
}

/// Unvalidated constraint options, mirroring the `w.constr` list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConstraint {
    pub name: Option<String>,
    pub p: Option<String>,
    pub dir: Option<String>,
    #[serde(rename = "Q")]
    pub q: Option<f64>,
    #[serde(rename = "Q2")]
    pub q2: Option<f64>,
    pub lb: Option<RawBound>,
}

impl RawConstraint {
    pub fn named(name: &str) -> Self {
        Self {
            name: Some(name.to_string()),
            ..Default::default()
        }
    }
}

/// A validated feasibility set for `w`. `q`/`q2` may be unset only for the
/// tunable presets (lasso, ridge, L1-L2) until tuning resolves them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub name: Option<Preset>,
    pub p: Norm,
    pub dir: Option<Direction>,
    pub q: Option<f64>,
    pub q2: Option<f64>,
    pub lb: LowerBound,
}

fn parse_norm(s: &str) -> Result<Norm, ConstraintError> {
    match s.to_ascii_lowercase().as_str() {
        "no norm" | "none" => Ok(Norm::None),
        "l1" => Ok(Norm::L1),
        "l2" => Ok(Norm::L2),
        "l1-l2" => Ok(Norm::L1L2),
        _ => Err(ConstraintError::UnknownValue {
            option: "p",
            value: s.to_string(),
        }),
    }
}

fn parse_dir(s: &str) -> Result<Direction, ConstraintError> {
    match s.replace(' ', "").as_str() {
        "==" => Ok(Direction::Eq),
        "<=" => Ok(Direction::Le),
        "==/<=" => Ok(Direction::EqLe),
        _ => Err(ConstraintError::UnknownValue {
            option: "dir",
            value: s.to_string(),
        }),
    }
}

fn parse_lb(b: &RawBound) -> Result<LowerBound, ConstraintError> {
    let bad = || ConstraintError::UnknownValue {
        option: "lb",
        value: format!("{b:?}"),
    };
    match b {
        RawBound::Number(x) if *x == 0.0 => Ok(LowerBound::Zero),
        RawBound::Number(x) if *x == f64::NEG_INFINITY => Ok(LowerBound::NegInf),
        RawBound::Number(_) => Err(bad()),
        RawBound::Text(s) => match s.to_ascii_lowercase().as_str() {
            "0" => Ok(LowerBound::Zero),
            "-inf" => Ok(LowerBound::NegInf),
            _ => Err(bad()),
        },
    }
}

fn positive(x: Option<f64>, what: &'static str) -> Result<Option<f64>, ConstraintError> {
    match x {
        Some(v) if !(v.is_finite() && v > 0.0) => Err(ConstraintError::NonPositive(what)),
        other => Ok(other),
    }
}

impl ConstraintSpec {
    pub fn preset(p: Preset) -> Self {
        let (norm, dir, q, lb) = match p {
            Preset::Ols => (Norm::None, None, None, LowerBound::NegInf),
            Preset::Simplex => (Norm::L1, Some(Direction::Eq), Some(1.0), LowerBound::Zero),
            Preset::Lasso => (Norm::L1, Some(Direction::Le), None, LowerBound::NegInf),
            Preset::Ridge => (Norm::L2, Some(Direction::Le), None, LowerBound::NegInf),
            Preset::L1L2 => (Norm::L1L2, Some(Direction::EqLe), None, LowerBound::Zero),
        };
        Self {
            name: Some(p),
            p: norm,
            dir,
            q,
            q2: None,
            lb,
        }
    }

    /// Validate user options and expand preset names. With nothing set the
    /// simplex with `Q = 1` is returned.
    pub fn from_options(raw: &RawConstraint) -> Result<Self, ConstraintError> {
        let q = positive(raw.q, "Q")?;
        let q2 = positive(raw.q2, "Q2")?;
        let p = raw.p.as_deref().map(parse_norm).transpose()?;
        let dir = raw.dir.as_deref().map(parse_dir).transpose()?;
        let lb = raw.lb.as_ref().map(parse_lb).transpose()?;

        let Some(name) = raw.name.as_deref() else {
            return Self::manual(p, dir, q, q2, lb);
        };
        let preset = Preset::parse(name)?;
        let mut spec = Self::preset(preset);
        let conflict = |what: &str| {
            ConstraintError::InconsistentSpec(format!("`{what}` conflicts with preset `{name}`"))
        };
        if p.is_some_and(|p| p != spec.p) {
            return Err(conflict("p"));
        }
        if dir.is_some_and(|d| Some(d) != spec.dir) {
            return Err(conflict("dir"));
        }
        if lb.is_some_and(|l| l != spec.lb) {
            return Err(conflict("lb"));
        }
        match preset {
            Preset::Ols if q.is_some() || q2.is_some() => {
                return Err(conflict("Q"));
            }
            Preset::Simplex | Preset::Lasso | Preset::Ridge if q2.is_some() => {
                return Err(conflict("Q2"));
            }
            _ => {}
        }
        if preset != Preset::Ols {
            spec.q = q.or(spec.q);
        }
        if preset == Preset::L1L2 {
            spec.q2 = q2;
        }
        Ok(spec)
    }

    fn manual(
        p: Option<Norm>,
        dir: Option<Direction>,
        q: Option<f64>,
        q2: Option<f64>,
        lb: Option<LowerBound>,
    ) -> Result<Self, ConstraintError> {
        let inconsistent = |m: &str| Err(ConstraintError::InconsistentSpec(m.to_string()));
        let Some(p) = p else {
            if dir.is_none() && q.is_none() && q2.is_none() && lb.is_none() {
                return Ok(Self::preset(Preset::Simplex));
            }
            return inconsistent("`p` is required when no preset name is given");
        };
        let lb = lb.unwrap_or(LowerBound::Zero);
        match p {
            Norm::None => {
                if q.is_some() || q2.is_some() || dir.is_some() {
                    return inconsistent("`no norm` takes no Q, Q2 or dir");
                }
                Ok(Self {
                    name: None,
                    p,
                    dir: None,
                    q: None,
                    q2: None,
                    lb,
                })
            }
            Norm::L1 | Norm::L2 => {
                let label = if p == Norm::L1 { "L1" } else { "L2" };
                let q = q.ok_or(ConstraintError::MissingQ(label))?;
                if q2.is_some() {
                    return inconsistent("Q2 is only used with the L1-L2 norm");
                }
                let dir = dir.unwrap_or(Direction::Le);
                match (p, dir, lb) {
                    (_, Direction::EqLe, _) => inconsistent("`==/<=` requires p = L1-L2"),
                    (Norm::L1, Direction::Eq, LowerBound::NegInf) => {
                        inconsistent("an L1 equality without a zero lower bound is not convex")
                    }
                    (Norm::L2, Direction::Eq, LowerBound::Zero) => inconsistent(
                        "an L2 equality restricted to nonnegative weights is not supported",
                    ),
                    _ => Ok(Self {
                        name: None,
                        p,
                        dir: Some(dir),
                        q: Some(q),
                        q2: None,
                        lb,
                    }),
                }
            }
            Norm::L1L2 => {
                let q = q.ok_or(ConstraintError::MissingQ("L1-L2"))?;
                let q2 = q2.ok_or(ConstraintError::MissingQ2)?;
                if dir.is_some_and(|d| d != Direction::EqLe) {
                    return inconsistent("the L1-L2 norm requires dir = `==/<=`");
                }
                if lb == LowerBound::NegInf {
                    return inconsistent("an L1 equality without a zero lower bound is not convex");
                }
                Ok(Self {
                    name: None,
                    p,
                    dir: Some(Direction::EqLe),
                    q: Some(q),
                    q2: Some(q2),
                    lb,
                })
            }
        }
    }

    /// Display label: the preset name, or `custom`.
    pub fn label(&self) -> &'static str {
        self.name.map_or("custom", Preset::as_str)
    }

    /// Whether tuning must fill `q` or `q2` before materializing.
    pub fn needs_tuning(&self) -> bool {
        match self.p {
            Norm::None => false,
            Norm::L1 | Norm::L2 => self.q.is_none(),
            Norm::L1L2 => self.q.is_none() || self.q2.is_none(),
        }
    }

    /// Build the explicit constraint functions for `J` weights and `kc`
    /// unconstrained covariate coefficients.
    pub fn materialize(&self, j: usize, kc: usize) -> Result<ConstraintSystem, ConstraintError> {
        let mut eqs = Vec::new();
        let mut ineqs = Vec::new();
        if self.lb == LowerBound::Zero {
            ineqs.extend((0..j).map(|index| Inequality::new(IneqKind::NonNeg { index })));
        }
        match self.p {
            Norm::None => {}
            Norm::L1 => {
                let q = self.q.ok_or(ConstraintError::MissingQ("L1"))?;
                match self.dir {
                    Some(Direction::Eq) => eqs.push(Equality::new(EqKind::Sum { target: q })),
                    _ => ineqs.push(Inequality::new(IneqKind::L1Ball { radius: q })),
                }
            }
            Norm::L2 => {
                let q = self.q.ok_or(ConstraintError::MissingQ("L2"))?;
                match self.dir {
                    Some(Direction::Eq) => eqs.push(Equality::new(EqKind::L2Sphere { radius: q })),
                    _ => ineqs.push(Inequality::new(IneqKind::L2Ball { radius: q })),
                }
            }
            Norm::L1L2 => {
                let q = self.q.ok_or(ConstraintError::MissingQ("L1-L2"))?;
                let q2 = self.q2.ok_or(ConstraintError::MissingQ2)?;
                eqs.push(Equality::new(EqKind::Sum { target: q }));
                ineqs.push(Inequality::new(IneqKind::L2Ball { radius: q2 }));
            }
        }
        Ok(ConstraintSystem {
            j,
            d: j + kc,
            offset: DVector::zeros(j + kc),
            eqs,
            ineqs,
        })
    }
}

/// Equality constraint functions of `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EqKind {
    /// `sum(w) - target`
    Sum { target: f64 },
    /// `||w||_2 - radius`
    L2Sphere { radius: f64 },
}

/// Inequality constraint functions of `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum IneqKind {
    /// `-w_index`
    NonNeg { index: usize },
    /// `||w||_1 - radius`
    L1Ball { radius: f64 },
    /// `||w||_2 - radius`
    L2Ball { radius: f64 },
}

impl EqKind {
    pub fn eval(&self, w: &[f64]) -> f64 {
        match *self {
            EqKind::Sum { target } => w.iter().sum::<f64>() - target,
            EqKind::L2Sphere { radius } => l2(w) - radius,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, EqKind::Sum { .. })
    }
}

impl IneqKind {
    pub fn eval(&self, w: &[f64]) -> f64 {
        match *self {
            IneqKind::NonNeg { index } => -w[index],
            IneqKind::L1Ball { radius } => w.iter().map(|x| x.abs()).sum::<f64>() - radius,
            IneqKind::L2Ball { radius } => l2(w) - radius,
        }
    }

    /// Gradient (subgradient for ℓ1, with 0 at zero coordinates) in `w`.
    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        match *self {
            IneqKind::NonNeg { index } => {
                let mut g = vec![0.0; w.len()];
                g[index] = -1.0;
                g
            }
            IneqKind::L1Ball { .. } => w
                .iter()
                .map(|x| if x.abs() <= ZERO_WEIGHT_TOL { 0.0 } else { x.signum() })
                .collect(),
            IneqKind::L2Ball { .. } => {
                let n = l2(w);
                if n == 0.0 {
                    vec![0.0; w.len()]
                } else {
                    w.iter().map(|x| x / n).collect()
                }
            }
        }
    }

    /// Linear on its own domain. The ℓ1 ball is polyhedral but not a single
    /// affine function, so it is reported as nonlinear.
    pub fn is_linear(&self) -> bool {
        matches!(self, IneqKind::NonNeg { .. })
    }
}

fn l2(w: &[f64]) -> f64 {
    w.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Equality {
    pub kind: EqKind,
    /// Feasible when `kind(offset + x) == rhs`.
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Inequality {
    pub kind: IneqKind,
    /// Feasible when `kind(offset + x) <= rhs`.
    pub rhs: f64,
}

impl Equality {
    pub fn new(kind: EqKind) -> Self {
        Self { kind, rhs: 0.0 }
    }
}

impl Inequality {
    pub fn new(kind: IneqKind) -> Self {
        Self { kind, rhs: 0.0 }
    }
}

/// Explicit constraints on a `d`-vector `x`, evaluated at `offset + x`.
///
/// In parameter space `offset = 0` and every `rhs = 0`, so the set is exactly
/// `{beta : m_eq(beta) = 0, m_in(beta) <= 0}`. Localized sets shift both.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintSystem {
    pub j: usize,
    pub d: usize,
    pub offset: DVector<f64>,
    pub eqs: Vec<Equality>,
    pub ineqs: Vec<Inequality>,
}

impl ConstraintSystem {
    /// No constraints on `d` coordinates.
    pub fn unconstrained(j: usize, d: usize) -> Self {
        Self {
            j,
            d,
            offset: DVector::zeros(d),
            eqs: Vec::new(),
            ineqs: Vec::new(),
        }
    }

    pub fn d_eq(&self) -> usize {
        self.eqs.len()
    }

    pub fn d_in(&self) -> usize {
        self.ineqs.len()
    }

    fn weights(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.j).map(|i| self.offset[i] + x[i]).collect()
    }

    /// `m_eq(offset + x) - rhs`.
    pub fn m_eq(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = self.weights(x);
        DVector::from_iterator(self.eqs.len(), self.eqs.iter().map(|e| e.kind.eval(&w) - e.rhs))
    }

    /// `m_in(offset + x) - rhs`.
    pub fn m_in(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = self.weights(x);
        DVector::from_iterator(
            self.ineqs.len(),
            self.ineqs.iter().map(|c| c.kind.eval(&w) - c.rhs),
        )
    }

    /// Gradient of the `k`-th inequality with respect to the full `d`-vector.
    pub fn grad_in(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let w = self.weights(x);
        let mut g = DVector::zeros(self.d);
        for (i, v) in self.ineqs[k].kind.grad(&w).into_iter().enumerate() {
            g[i] = v;
        }
        g
    }

    pub fn is_linear_in(&self, k: usize) -> bool {
        self.ineqs[k].kind.is_linear()
    }

    pub fn is_linear_eq(&self, k: usize) -> bool {
        self.eqs[k].kind.is_linear()
    }

    /// Whether any ℓ2-type constraint is present.
    pub fn has_l2(&self) -> bool {
        self.ineqs.iter().any(|c| matches!(c.kind, IneqKind::L2Ball { .. }))
            || self.eqs.iter().any(|e| matches!(e.kind, EqKind::L2Sphere { .. }))
    }

    /// Membership with absolute tolerance `tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.m_eq(x).iter().all(|v| v.abs() <= tol) && self.m_in(x).iter().all(|v| *v <= tol)
    }
}
