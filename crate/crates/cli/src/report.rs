//! Writers for the results bundle.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use scpi_core::uncertainty::PeriodInterval;

use crate::config::OutputConfig;
use crate::format::{cell, short, to_json};
use crate::{plotspec, CliError, ResultsBundle};

const INTERVAL_HEADER: [&str; 9] = ["constraint", "period", "tau_hat", "lower", "upper", "M1_L", "M1_U", "M2_L", "M2_U"];

fn interval_table(bundle: &ResultsBundle, pick: impl Fn(&crate::ConstraintResult) -> Option<&[PeriodInterval]>) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Output(e.into());
    w.write_record(INTERVAL_HEADER).map_err(io)?;
    for r in &bundle.results {
        let Some(rows) = pick(r) else { continue };
        for iv in rows {
            w.write_record([
                r.label.clone(),
                iv.period.to_string(),
                cell(iv.tau_hat),
                cell(iv.lower),
                cell(iv.upper),
                cell(iv.m1_l),
                cell(iv.m1_u),
                cell(iv.m2_l),
                cell(iv.m2_u),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Output(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}

/// One row per constraint and declared post period; unavailable periods
/// keep their row with `NA` in every value.
pub fn intervals_csv(bundle: &ResultsBundle) -> Result<String, CliError> {
    interval_table(bundle, |r| Some(&r.intervals))
}

/// Simultaneous intervals, when joint mode ran.
pub fn joint_csv(bundle: &ResultsBundle) -> Result<Option<String>, CliError> {
    if bundle.results.iter().all(|r| r.joint.is_none()) {
        return Ok(None);
    }
    interval_table(bundle, |r| r.joint.as_deref()).map(Some)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), short)
}

pub fn summary_text(bundle: &ResultsBundle) -> String {
    let d = &bundle.data;
    let u = &bundle.config.uncertainty;
    let mut s = String::new();
    let _ = writeln!(s, "Synthetic control prediction intervals");
    let _ = writeln!(s, "  treated unit   {}", d.treated);
    let _ = writeln!(s, "  donors         {} ({})", d.donors.len(), d.donors.join(", "));
    let _ = writeln!(s, "  features       {}", d.features.join(", "));
    let _ = writeln!(
        s,
        "  periods        pre {}..{} ({}), post {}..{} ({})",
        d.pre_periods.first().unwrap_or(&0),
        d.pre_periods.last().unwrap_or(&0),
        d.pre_periods.len(),
        d.post_periods.first().unwrap_or(&0),
        d.post_periods.last().unwrap_or(&0),
        d.post_periods.len()
    );
    if !d.missing.is_empty() {
        let _ = writeln!(
            s,
            "  missing data   dropped pre {:?}, unavailable post {:?}, treated missing post {:?}",
            d.missing.dropped_pre, d.missing.unavailable_post, d.missing.treated_missing_post
        );
    }
    let _ = writeln!(
        s,
        "  simulation     S = {}, seed = {}, alpha1 = {}, alpha2 = {}, e_method = {:?}",
        u.sims,
        u.seed,
        short(u.u_alpha),
        short(u.e_alpha),
        u.e_method
    );

    for r in &bundle.results {
        let f = &r.fit;
        let _ = writeln!(s);
        let _ = writeln!(s, "== {} ==", r.label);
        let _ = writeln!(
            s,
            "Q = {}, Q2 = {}, df = {}, rho = {}, objective = {}, coverage = {}",
            opt(f.q),
            opt(f.q2),
            short(f.df_hat),
            short(r.uncertainty.rho),
            short(f.objective),
            short(r.uncertainty.coverage)
        );
        let width = f.weights.iter().map(|w| w.name.len()).max().unwrap_or(0).max(8);
        let _ = writeln!(s, "Weights");
        for w in f.weights.iter().chain(&f.covariates) {
            let _ = writeln!(s, "  {:<width$}  {:>12}", w.name, short(w.value));
        }
        let _ = writeln!(s, "Intervals for the effect");
        let _ = writeln!(
            s,
            "  {:>8}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}",
            "period", "Y1", "Y0_hat", "tau_hat", "lower", "upper"
        );
        for iv in &r.intervals {
            let _ = writeln!(
                s,
                "  {:>8}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}",
                iv.period,
                opt(iv.y1),
                opt(iv.y0_hat),
                opt(iv.tau_hat),
                opt(iv.lower),
                opt(iv.upper)
            );
        }
        if let Some(joint) = &r.joint {
            let _ = writeln!(s, "Simultaneous intervals over {} periods", joint.len());
            for iv in joint {
                let _ = writeln!(s, "  {:>8}  {:>12}  {:>12}", iv.period, opt(iv.lower), opt(iv.upper));
            }
        }
        if let Some(sens) = &r.sensitivity {
            let _ = writeln!(
                s,
                "Sensitivity at {} (sigma = {}, Y1 = {})",
                sens.period,
                short(sens.sigma),
                opt(sens.y1)
            );
            for row in &sens.rows {
                let _ = writeln!(
                    s,
                    "  scale {:>6}  effect [{}, {}]  counterfactual [{}, {}]",
                    short(row.scale),
                    opt(row.lower),
                    opt(row.upper),
                    short(row.y0_lower),
                    short(row.y0_upper)
                );
            }
        }
        for w in &r.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
    }
    s
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, body)?;
    Ok(path)
}

/// Write the enabled outputs into `out.dir`, creating it if needed, and
/// return the paths written.
pub fn write_outputs(bundle: &ResultsBundle, out: &OutputConfig) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(&out.dir)?;
    let mut written = Vec::new();
    if out.json {
        let body = to_json(bundle).map_err(|e| CliError::Output(e.into()))?;
        written.push(write(&out.dir, "results.json", &body)?);
    }
    if out.csv {
        written.push(write(&out.dir, "intervals.csv", &intervals_csv(bundle)?)?);
        if let Some(joint) = joint_csv(bundle)? {
            written.push(write(&out.dir, "joint_intervals.csv", &joint)?);
        }
    }
    if out.summary {
        written.push(write(&out.dir, "summary.txt", &summary_text(bundle))?);
    }
    if out.plotspec {
        let body = to_json(&plotspec::build(bundle)).map_err(|e| CliError::Output(e.into()))?;
        written.push(write(&out.dir, "plotspec.json", &body)?);
    }
    Ok(written)
}
