//! Synthetic panels written to disk in long format, plus matching configs.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scpi_testkit::dgp::FactorDesign;

/// Panel shaped like the classic cross-country application: 16 donors,
/// yearly data 1960-2003, treatment from 1991, two variables.
pub struct PanelFile {
    pub path: PathBuf,
    pub donors: Vec<String>,
}

pub fn write_panel(dir: &Path, seed: u64, j: usize) -> PanelFile {
    let (t0, t1) = (31, 13);
    let mut w0 = vec![0.0; j];
    w0[0] = 0.4;
    w0[1] = 0.35;
    w0[2] = 0.25;
    let design = FactorDesign {
        j,
        w0,
        ..FactorDesign::standard(t0, t1)
    };
    let d = design.draw(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let donors: Vec<String> = (0..j).map(|k| format!("donor_{k:02}")).collect();
    let mut csv = String::from("country,year,gdp,trade\n");
    let mut row = |unit: &str, year: usize, gdp: f64, rng: &mut ChaCha8Rng| {
        let trade = 0.3 * gdp + rng.random_range(-0.5..0.5);
        let _ = writeln!(csv, "{unit},{},{gdp},{trade}", 1960 + year);
    };
    for t in 0..t0 + t1 {
        let treated = if t < t0 { d.a[t] } else { d.y1_post[t - t0] };
        row("Treated", t, treated, &mut rng);
        for (k, name) in donors.iter().enumerate() {
            let gdp = if t < t0 { d.b[(t, k)] } else { d.p[(t - t0, k)] };
            row(name, t, gdp, &mut rng);
        }
    }
    let path = dir.join("panel.csv");
    std::fs::write(&path, csv).unwrap();
    PanelFile { path, donors }
}

/// A config for the panel above; `extra` is appended verbatim.
pub fn config_text(panel: &PanelFile, out: &Path, extra: &str) -> String {
    let donors: Vec<String> = panel.donors.iter().map(|d| format!("\"{d}\"")).collect();
    format!(
        r#"[data]
path = "{}"
id_var = "country"
time_var = "year"
outcome_var = "gdp"
unit_tr = "Treated"
unit_co = [{}]
period_pre = {{ from = 1960, to = 1990 }}
period_post = {{ from = 1991, to = 2003 }}
constant = true

[output]
dir = "{}"

{extra}
"#,
        panel.path.display(),
        donors.join(", "),
        out.display()
    )
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}
