//! Report rendering and atomic output.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use panel_dml::EstimateReport;

use crate::error::CliError;
use crate::run::Cell;

/// A finished output file, held in memory until the run succeeds.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: &'static str,
    pub contents: String,
}

impl Artifact {
    pub fn new(name: &'static str, contents: String) -> Self {
        Self { name, contents }
    }

    pub fn json(name: &'static str, value: &impl Serialize) -> Self {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        Self::new(name, text)
    }
}

/// Write every artifact to a temporary file in `dir`, then rename them all
/// into place. A failure before the renames leaves `dir` untouched.
pub fn write_atomically(dir: &Path, artifacts: &[Artifact]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let mut staged = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let mut tmp = tempfile::Builder::new()
            .prefix(&format!(".{}.", a.name))
            .tempfile_in(dir)?;
        tmp.write_all(a.contents.as_bytes())?;
        tmp.as_file().sync_all()?;
        staged.push((tmp, dir.join(a.name)));
    }
    for (tmp, target) in staged {
        tmp.persist(&target)
            .map_err(|e| CliError::Output(e.error))?;
    }
    Ok(())
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn csv_text(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 input")
}

/// Left-aligned first column, right-aligned rest.
fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c == 0 {
                line.push_str(&format!("{cell:<w$}", w = widths[0]));
            } else {
                line.push_str(&format!("  {cell:>w$}", w = widths[c]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

pub fn estimate_csv(labels: &[String], reports: &[Vec<EstimateReport>]) -> String {
    let mut rows = vec![[
        "estimand",
        "estimator",
        "estimate",
        "std_error",
        "ci_lower",
        "ci_upper",
        "n",
    ]
    .map(String::from)
    .to_vec()];
    for (label, row) in labels.iter().zip(reports) {
        for r in row {
            rows.push(vec![
                label.clone(),
                r.estimator.clone(),
                f4(r.point),
                f4(r.std_error),
                f4(r.ci.0),
                f4(r.ci.1),
                r.n.to_string(),
            ]);
        }
    }
    csv_text(rows)
}

/// Estimators down, estimands across; standard errors in parentheses under
/// each estimate.
pub fn estimate_text(
    labels: &[String],
    names: &[String],
    reports: &[Vec<EstimateReport>],
) -> String {
    let mut rows = vec![std::iter::once("Estimator".to_string())
        .chain(labels.iter().cloned())
        .collect::<Vec<_>>()];
    for (e, name) in names.iter().enumerate() {
        let mut est = vec![name.clone()];
        let mut se = vec![String::new()];
        for row in reports {
            est.push(f4(row[e].point));
            se.push(format!("({})", f4(row[e].std_error)));
        }
        rows.push(est);
        rows.push(se);
    }
    render(&rows)
}

pub(crate) fn simulation_csv(cells: &[Cell]) -> String {
    let mut rows = vec![[
        "dgp",
        "n_units",
        "n_covariates",
        "estimand",
        "estimator",
        "truth",
        "estimate",
        "bias",
        "std_dev",
        "mse",
        "est_sd",
        "coverage",
        "replications",
        "failures",
    ]
    .map(String::from)
    .to_vec()];
    for cell in cells {
        for r in &cell.results {
            let metric = |f: fn(&panel_dml::McMetrics) -> f64| {
                r.metrics.as_ref().map(|m| f4(f(m))).unwrap_or_default()
            };
            rows.push(vec![
                format!("{:?}", cell.dgp.variant).to_lowercase(),
                cell.dgp.n_units.to_string(),
                cell.dgp.n_covariates.to_string(),
                r.estimand.clone(),
                r.estimator.clone(),
                f4(r.truth),
                metric(|m| m.estimate_mean),
                metric(|m| m.bias),
                metric(|m| m.std_dev),
                metric(|m| m.mse),
                metric(|m| m.est_sd_mean),
                metric(|m| m.coverage),
                r.replications.to_string(),
                r.failures.to_string(),
            ]);
        }
    }
    csv_text(rows)
}

/// Every replication; full precision so the estimates can be re-analysed.
pub(crate) fn replications_csv(cells: &[Cell]) -> String {
    let mut rows = vec![[
        "n_units",
        "n_covariates",
        "replication",
        "seed",
        "estimator",
        "estimand",
        "truth",
        "estimate",
        "std_error",
        "covered",
        "error",
    ]
    .map(String::from)
    .to_vec()];
    for cell in cells {
        for r in &cell.records {
            rows.push(vec![
                cell.dgp.n_units.to_string(),
                cell.dgp.n_covariates.to_string(),
                r.replication.to_string(),
                r.seed.to_string(),
                r.estimator.clone(),
                r.estimand.clone(),
                r.truth.to_string(),
                r.estimate.map(|v| v.to_string()).unwrap_or_default(),
                r.std_error.map(|v| v.to_string()).unwrap_or_default(),
                r.covered.map(|v| v.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ]);
        }
    }
    csv_text(rows)
}

fn find<'a>(
    cell: &'a Cell,
    estimator: &str,
    estimand: &str,
) -> Option<&'a panel_dml::simulation::McResult> {
    cell.results
        .iter()
        .find(|r| r.estimator == estimator && r.estimand == estimand)
}

/// One block per estimand. A single cell gets the metric-by-estimator
/// layout; a grid gets one row per cell with four metrics per estimator.
pub(crate) fn simulation_text(cells: &[Cell], labels: &[String], names: &[String]) -> String {
    let mut out = String::new();
    for (i, label) in labels.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(label);
        out.push('\n');
        let rows = if let [cell] = cells {
            single_cell(cell, label, names)
        } else {
            grid(cells, label, names)
        };
        out.push_str(&render(&rows));
    }
    out
}

fn single_cell(cell: &Cell, label: &str, names: &[String]) -> Vec<Vec<String>> {
    type Getter = fn(&panel_dml::simulation::McResult) -> Option<String>;
    let lines: [(&str, Getter); 7] = [
        ("True Value", |r| Some(format!("{}", r.truth))),
        ("Estimate", |r| r.metrics.map(|m| f4(m.estimate_mean))),
        ("Bias", |r| r.metrics.map(|m| f4(m.bias))),
        ("Std. Dev.", |r| r.metrics.map(|m| f4(m.std_dev))),
        ("MSE", |r| r.metrics.map(|m| f4(m.mse))),
        ("Est. S.D.", |r| r.metrics.map(|m| f4(m.est_sd_mean))),
        ("Coverage", |r| r.metrics.map(|m| format!("{}", m.coverage))),
    ];
    let mut rows = vec![std::iter::once(String::new())
        .chain(names.iter().cloned())
        .collect::<Vec<_>>()];
    for (title, get) in lines {
        let mut row = vec![title.to_string()];
        for n in names {
            row.push(
                find(cell, n, label)
                    .and_then(get)
                    .unwrap_or_else(|| "-".into()),
            );
        }
        rows.push(row);
    }
    rows
}

fn grid(cells: &[Cell], label: &str, names: &[String]) -> Vec<Vec<String>> {
    let mut head = vec!["Specification".to_string()];
    for n in names {
        for m in ["Bias", "S.D.", "MSE", "Cvg."] {
            head.push(format!("{n} {m}"));
        }
    }
    let mut rows = vec![head];
    for cell in cells {
        let mut row = vec![format!(
            "L={}, N={}",
            cell.dgp.n_covariates, cell.dgp.n_units
        )];
        for n in names {
            match find(cell, n, label).and_then(|r| r.metrics) {
                Some(m) => row.extend([
                    f4(m.bias),
                    f4(m.std_dev),
                    f4(m.mse),
                    format!("{}", m.coverage),
                ]),
                None => row.extend(std::iter::repeat_n("-".to_string(), 4)),
            }
        }
        rows.push(row);
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_aligns_columns() {
        let rows = vec![
            vec!["".to_string(), "A".to_string(), "Longer".to_string()],
            vec![
                "Bias".to_string(),
                "0.1234".to_string(),
                "1.0000".to_string(),
            ],
        ];
        assert_eq!(
            render(&rows),
            "           A  Longer\nBias  0.1234  1.0000\n"
        );
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("table.txt"), "old").unwrap();
        let a = [
            Artifact::new("table.txt", "new\n".into()),
            Artifact::new("table.csv", "a,b\n".into()),
        ];
        write_atomically(dir.path(), &a).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.path().join("table.txt")).unwrap(),
            "new\n"
        );
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.len(), 2, "{names:?}");
    }
}
