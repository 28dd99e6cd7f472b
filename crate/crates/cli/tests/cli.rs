use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use panel_dml::{simulate, DgpSpec, DgpVariant, PanelDataset};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_panel-dml"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("error JSON on stderr");
    serde_json::from_str(line).expect("valid JSON")
}

/// Long-format CSV with columns shaped like a school-cohort survey: a
/// treatment, an outcome and a few covariates, rows shuffled by period.
fn write_panel(path: &Path, panel: &PanelDataset) {
    let l = panel.covariates.dim().2;
    let mut text = String::from("childid,wave,bmi,ses");
    for j in 1..=l {
        write!(text, ",cov{j}").unwrap();
    }
    text.push('\n');
    for t in (0..panel.outcome.ncols()).rev() {
        for i in 0..panel.outcome.nrows() {
            write!(
                text,
                "C{:04},{},{},{}",
                i,
                t + 1,
                panel.outcome[[i, t]],
                panel.treatment[[i, t]]
            )
            .unwrap();
            for j in 0..l {
                write!(text, ",{}", panel.covariates[[i, t, j]]).unwrap();
            }
            text.push('\n');
        }
    }
    std::fs::write(path, text).unwrap();
}

fn survey_panel(dir: &Path, n: usize) -> PathBuf {
    let panel = simulate(&DgpSpec {
        variant: DgpVariant::Dgp1,
        n_units: n,
        n_periods: 6,
        n_covariates: 2,
        seed: 11,
    })
    .unwrap();
    let path = dir.join("panel.csv");
    write_panel(&path, &panel);
    path
}

const SCHEMA: &str = r#"
[data.schema]
unit = "childid"
period = "wave"
outcome = "bmi"
treatment = "ses"
covariates = ["cov1", "cov2"]
"#;

fn estimate_config(dir: &Path, estimands: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"mode = "estimate"
seed = 3
model = "dynamic"
lags = {{ q = 1, p = 0 }}
estimators = ["DPGMM"]
estimands = {estimands}
{extra}
[data]
path = "panel.csv"
{SCHEMA}
[output]
dir = "out"
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const TABLE_TWO: &str = "[{ t = 6, s = 0 }, { t = 6, s = 1 }, { t = 5, s = 0 }, { t = 5, s = 1 }, \
                         { t = 4, s = 0 }, { t = 4, s = 1 }, { t = 3, s = 0 }]";

#[test]
fn survey_shaped_estimate_writes_seven_column_report() {
    let dir = tempfile::tempdir().unwrap();
    survey_panel(dir.path(), 300);
    let cfg = estimate_config(dir.path(), TABLE_TWO, "");
    let out = run(&["estimate", cfg.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let table = std::fs::read_to_string(dir.path().join("out/table.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(
        header,
        [
            "Estimator",
            "theta_6(0)",
            "theta_6(1)",
            "theta_5(0)",
            "theta_5(1)",
            "theta_4(0)",
            "theta_4(1)",
            "theta_3(0)"
        ]
    );
    assert_eq!(lines[1].split_whitespace().count(), 8);
    let ses: Vec<&str> = lines[2].split_whitespace().collect();
    assert_eq!(ses.len(), 7);
    assert!(ses.iter().all(|s| s.starts_with('(') && s.ends_with(')')));
    // the table goes to stdout as well
    assert_eq!(String::from_utf8_lossy(&out.stdout), table);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    let estimates = report["estimates"].as_array().unwrap();
    assert_eq!(estimates.len(), 7);
    for e in estimates {
        let (lo, hi) = (e["ci"][0].as_f64().unwrap(), e["ci"][1].as_f64().unwrap());
        let point = e["point"].as_f64().unwrap();
        assert!(lo <= point && point <= hi);
        assert!(e["std_error"].as_f64().unwrap() > 0.0);
    }
    let csv = std::fs::read_to_string(dir.path().join("out/table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv
        .lines()
        .next()
        .unwrap()
        .starts_with("estimand,estimator,estimate,std_error"));
}

#[test]
fn estimate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    survey_panel(dir.path(), 200);
    let cfg = estimate_config(dir.path(), "[{ t = 6, s = 0 }]", "");
    let read = |name: &str| std::fs::read(dir.path().join("out").join(name)).unwrap();
    assert!(run(&["estimate", cfg.to_str().unwrap()]).status.success());
    let first = (read("report.json"), read("table.csv"));
    assert!(run(&["estimate", cfg.to_str().unwrap(), "--threads", "1"])
        .status
        .success());
    assert_eq!(first, (read("report.json"), read("table.csv")));
}

#[test]
fn pre_sample_lag_is_rejected_before_fitting() {
    let dir = tempfile::tempdir().unwrap();
    survey_panel(dir.path(), 200);
    let cfg = estimate_config(dir.path(), "[{ t = 6, s = 0 }, { t = 3, s = 1 }]", "");
    let out = run(&["estimate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("theta_3(1)"), "{msg}");
    assert!(msg.contains("insufficient history"), "{msg}");
    assert!(
        !dir.path().join("out").exists(),
        "no partial output on failure"
    );
}

#[test]
fn fewer_units_than_folds_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("unit,period,y,d,x_1\n");
    for u in 1..=2 {
        for t in 1..=4 {
            writeln!(text, "{u},{t},{}.5,{}.25,0.{t}", u + t, u * t).unwrap();
        }
    }
    std::fs::write(dir.path().join("tiny.csv"), text).unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(
        &cfg,
        "mode = \"estimate\"\nfolds = 5\nestimators = [\"GMM\"]\nestimands = [{ t = 4, s = 0 }]\n[data]\npath = \"tiny.csv\"\n",
    )
    .unwrap();
    let out = run(&["estimate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["exit_code"], 2);
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // unit 2 is missing period 2
    std::fs::write(
        dir.path().join("panel.csv"),
        "unit,period,y,d\n1,1,0,0\n1,2,0,0\n2,1,0,0\n",
    )
    .unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "mode = \"estimate\"\nestimators = [\"GMM\"]\nestimands = [{ t = 2, s = 0 }]\n[data]\npath = \"panel.csv\"\n",
    )
    .unwrap();
    let out = run(&["estimate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"]["kind"], "data");
}

#[test]
fn missing_column_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    survey_panel(dir.path(), 50);
    let cfg = estimate_config(dir.path(), "[{ t = 6, s = 0 }]", "");
    let out = run(&[
        "estimate",
        cfg.to_str().unwrap(),
        "--set",
        "data.schema.treatment=income",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr_json(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .to_string();
    assert!(msg.contains("income"), "{msg}");
}

fn simulate_config(dir: &Path, replications: usize) -> PathBuf {
    let path = dir.join("sim.toml");
    std::fs::write(
        &path,
        format!(
            r#"mode = "simulate"
seed = 5
estimators = ["DPGMM", "GMM"]
estimands = [{{ t = 10, s = 0 }}]

[simulation]
dgp = "dgp1"
replications = {replications}
n_units = [200, 300]
n_covariates = [2]
"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn zero_replications_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate_config(dir.path(), 0);
    let out = run(&["simulate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mode_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate_config(dir.path(), 1);
    let out = run(&["estimate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_grid_tables_and_replications() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate_config(dir.path(), 2);
    let out_dir = dir.path().join("elsewhere");
    let out = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let table = std::fs::read_to_string(out_dir.join("table.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "theta_10(0)");
    assert!(lines[1].starts_with("Specification"));
    assert!(lines[2].starts_with("L=2, N=200"));
    assert!(lines[3].starts_with("L=2, N=300"));
    // two estimators times four metrics
    assert_eq!(lines[2].split_whitespace().count(), 2 + 8);

    let reps = std::fs::read_to_string(out_dir.join("replications.csv")).unwrap();
    // header + 2 cells × 2 replications × 2 estimators
    assert_eq!(reps.lines().count(), 1 + 8);
    let summary = std::fs::read_to_string(out_dir.join("table.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["cells"][0]["dgp"]["seed"], 9);
}

#[test]
fn malformed_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate_config(dir.path(), 1);
    let out = run(&["simulate", cfg.to_str().unwrap(), "--set", "no_equals_sign"]);
    assert_eq!(out.status.code(), Some(2));
}
