mod common;

use std::path::Path;
use std::process::Command;

use scpi_cli::{report, RunConfig};
use serde_json::Value;

use common::{config_text, write_config, write_panel};

fn scpi(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_scpi")).args(args).output().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn layers<'a>(panel: &'a Value, mark: &str) -> Vec<&'a Value> {
    panel["layers"].as_array().unwrap().iter().filter(|l| l["mark"] == mark).collect()
}

#[test]
fn end_to_end_run_writes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = write_panel(tmp.path(), 3, 16);
    let out = tmp.path().join("out");
    let cfg = write_config(
        tmp.path(),
        &config_text(&panel, &out, "[uncertainty]\nsens_scales = [0.5, 1.0, 1.5, 2.0]\nsens_period = 1997\n"),
    );
    let res = scpi(&[
        "--config",
        cfg.to_str().unwrap(),
        "--sims",
        "40",
        "--joint",
        "--constraint",
        "simplex",
        "--constraint",
        "ridge",
        "--quiet",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(res.stdout.is_empty());

    let csv = std::fs::read_to_string(out.join("intervals.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "constraint,period,tau_hat,lower,upper,M1_L,M1_U,M2_L,M2_U");
    assert_eq!(lines.count(), 2 * 13);
    assert!(out.join("joint_intervals.csv").exists());
    assert!(std::fs::read_to_string(out.join("summary.txt")).unwrap().contains("== ridge =="));

    let results = read_json(&out.join("results.json"));
    assert_eq!(results["config"]["uncertainty"]["sims"], 40);
    assert_eq!(results["results"].as_array().unwrap().len(), 2);
    let q = results["results"][1]["fit"]["q"].as_f64().unwrap();
    assert!(q > 0.0);

    let plot = read_json(&out.join("plotspec.json"));
    let panels = plot["panels"].as_array().unwrap();
    // a main panel and a sensitivity panel per constraint
    assert_eq!(panels.len(), 4);
    let main = &panels[0];
    assert_eq!(layers(main, "line").len(), 2);
    let bars = layers(main, "errorbar");
    assert_eq!(bars.len(), 1);
    assert_eq!(bars[0]["data"].as_array().unwrap().len(), 13);
    assert_eq!(layers(main, "area").len(), 1);
    let sens = &panels[1];
    assert_eq!(layers(sens, "errorbar")[0]["data"].as_array().unwrap().len(), 4);
}

#[test]
fn plotspec_has_no_band_without_joint_intervals() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = write_panel(tmp.path(), 4, 6);
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &config_text(&panel, &out, "[[constraint]]\nname = \"simplex\"\n"));
    let res = scpi(&["--config", cfg.to_str().unwrap(), "--sims", "20", "--quiet"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let plot = read_json(&out.join("plotspec.json"));
    let panels = plot["panels"].as_array().unwrap();
    assert_eq!(panels.len(), 1);
    assert!(layers(&panels[0], "area").is_empty());
    assert!(!out.join("joint_intervals.csv").exists());
}

#[test]
fn empty_donor_list_is_rejected_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = write_panel(tmp.path(), 5, 4);
    let out = tmp.path().join("out");
    let text = config_text(&panel, &out, "[[constraint]]\nname = \"simplex\"\n");
    let text = text
        .lines()
        .map(|l| if l.starts_with("unit_co") { "unit_co = []" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    let cfg = write_config(tmp.path(), &text);
    let res = scpi(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("empty"));
    assert!(!out.exists());
}

#[test]
fn an_empty_constraint_set_is_a_numerical_failure() {
    // with 16 donors no simplex point has an l2 norm below 1/4
    let tmp = tempfile::tempdir().unwrap();
    let panel = write_panel(tmp.path(), 6, 16);
    let out = tmp.path().join("out");
    let extra = "[[constraint]]\nname = \"L1-L2\"\nQ = 1.0\nQ2 = 0.1\n";
    let cfg = write_config(tmp.path(), &config_text(&panel, &out, extra));
    let res = scpi(&["--config", cfg.to_str().unwrap(), "--sims", "10"]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn unavailable_periods_keep_their_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = write_panel(tmp.path(), 7, 5);
    let data = std::fs::read_to_string(&panel.path).unwrap();
    // blank one donor outcome in 1995
    let data: String = data
        .lines()
        .map(|l| {
            if l.starts_with("donor_01,1995,") {
                let trade = l.rsplit(',').next().unwrap();
                format!("donor_01,1995,,{trade}\n")
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    std::fs::write(&panel.path, data).unwrap();
    let out = tmp.path().join("out");
    let cfg = RunConfig::from_toml(&config_text(&panel, &out, "[[constraint]]\nname = \"simplex\"\n[uncertainty]\nsims = 20\n"))
        .unwrap();
    let bundle = scpi_cli::run(&cfg).unwrap();
    let csv = report::intervals_csv(&bundle).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 13);
    assert_eq!(rows[4], "simplex,1995,NA,NA,NA,NA,NA,NA,NA");
    assert_eq!(bundle.data.missing.unavailable_post, vec![1995]);
    assert!(rows.iter().filter(|r| r.contains("NA")).count() == 1);
}

#[test]
fn reruns_differ_only_in_the_timestamp() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = write_panel(tmp.path(), 8, 6);
    let out = tmp.path().join("out");
    let text = config_text(&panel, &out, "[[constraint]]\nname = \"lasso\"\n[uncertainty]\nsims = 30\n");
    let run = || {
        let cfg = RunConfig::from_toml(&text).unwrap();
        let bundle = scpi_cli::run(&cfg).unwrap();
        report::write_outputs(&bundle, &cfg.output).unwrap();
        std::fs::read_to_string(cfg.output.dir.join("results.json")).unwrap()
    };
    let strip = |s: String| s.lines().filter(|l| !l.contains("\"generated_at\"")).collect::<Vec<_>>().join("\n");
    let (a, b) = (run(), run());
    assert!(a.contains("\"generated_at\""));
    assert_eq!(strip(a), strip(b));
}

#[test]
fn readme_config_example_parses() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let toml = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let cfg = RunConfig::from_toml(toml).unwrap();
    assert_eq!(cfg.constraints.len(), 3);
    assert!(cfg.uncertainty.joint);
}
