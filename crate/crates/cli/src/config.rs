//! Run configuration: a TOML document with one section per pipeline stage.
//!
//! ```toml
//! [data]
//! path = "germany.csv"
//! id_var = "country"
//! time_var = "year"
//! outcome_var = "gdp"
//! unit_tr = "West Germany"
//! unit_co = ["USA", "UK", "Austria"]
//! period_pre = { from = 1960, to = 1990 }
//! period_post = { from = 1991, to = 2003 }
//!
//! [[constraint]]
//! name = "simplex"
//!
//! [uncertainty]
//! sims = 1000
//! u_alpha = 0.05
//! e_alpha = 0.05
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use scpi_core::constraints::{ConstraintSpec, RawConstraint};
use scpi_core::panel::{Covariate, CovariateAdjustment, MatrixOptions, PanelSchema};
use scpi_core::uncertainty::UncertaintyConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A period list written either explicitly or as an inclusive range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Periods {
    Range { from: i64, to: i64 },
    List(Vec<i64>),
}

impl Periods {
    pub fn expand(&self) -> Vec<i64> {
        match self {
            Periods::Range { from, to } => (*from..=*to).collect(),
            Periods::List(v) => v.clone(),
        }
    }
}

/// `["constant", "trend"]` for every feature, or one list per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovAdjConfig {
    Shared(Vec<Covariate>),
    PerFeature(Vec<Vec<Covariate>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    pub id_var: String,
    pub time_var: String,
    pub outcome_var: String,
    #[serde(default)]
    pub features: Vec<String>,
    pub unit_tr: String,
    pub unit_co: Vec<String>,
    pub period_pre: Periods,
    pub period_post: Periods,
    #[serde(default = "comma")]
    pub delimiter: char,
    #[serde(default)]
    pub cov_adj: Option<CovAdjConfig>,
    #[serde(default)]
    pub constant: bool,
    #[serde(default)]
    pub cointegrated: bool,
}

fn comma() -> char {
    ','
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub json: bool,
    pub csv: bool,
    pub plotspec: bool,
    pub summary: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("scpi-out"),
            json: true,
            csv: true,
            plotspec: true,
            summary: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default, rename = "constraint")]
    pub constraints: Vec<RawConstraint>,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parse a config file; the data path becomes relative to its directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.data.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks that need no data: roles, periods, constraint grammar and
    /// uncertainty options.
    pub fn validate(&self) -> Result<Vec<ConstraintSpec>, CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.unit_co.is_empty() {
            return bad("donor list `unit_co` is empty".into());
        }
        if self.data.period_pre.expand().is_empty() || self.data.period_post.expand().is_empty() {
            return bad("pre- and post-treatment period sets must be nonempty".into());
        }
        if !self.data.delimiter.is_ascii() {
            return bad(format!("delimiter `{}` is not a single-byte character", self.data.delimiter));
        }
        if self.constraints.is_empty() {
            return bad("at least one [[constraint]] section or --constraint flag is required".into());
        }
        let t1 = self.data.period_post.expand().len();
        if let Some(l) = self.uncertainty.horizon {
            if l == 0 || l > t1 {
                return bad(format!("horizon must be in 1..={t1}, got {l}"));
            }
        }
        self.constraints
            .iter()
            .map(|raw| ConstraintSpec::from_options(raw).map_err(|e| CliError::Config(e.to_string())))
            .collect()
    }

    pub fn schema(&self) -> PanelSchema {
        let d = &self.data;
        PanelSchema {
            id_var: d.id_var.clone(),
            time_var: d.time_var.clone(),
            outcome_var: d.outcome_var.clone(),
            features: d.features.clone(),
            unit_tr: d.unit_tr.clone(),
            unit_co: d.unit_co.clone(),
            period_pre: d.period_pre.expand(),
            period_post: d.period_post.expand(),
            delimiter: d.delimiter as u8,
        }
    }

    pub fn matrix_options(&self) -> MatrixOptions {
        MatrixOptions {
            cov_adj: match &self.data.cov_adj {
                None => CovariateAdjustment::None,
                Some(CovAdjConfig::Shared(v)) => CovariateAdjustment::Shared(v.clone()),
                Some(CovAdjConfig::PerFeature(v)) => CovariateAdjustment::PerFeature(v.clone()),
            },
            constant: self.data.constant,
            cointegrated: self.data.cointegrated,
            v: None,
        }
    }
}
