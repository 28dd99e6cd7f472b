//! Estimation and simulation runs. Each returns the files to write; nothing
//! touches the output directory until the whole run has succeeded.

use std::fs::File;
use std::io::BufReader;

use serde::Serialize;

use panel_dml::simulation::{McResult, ReplicationRecord};
use panel_dml::{
    estimate_requests, load_panel, run_monte_carlo, DgpSpec, EstimateReport, McConfig,
};

use crate::config::{Format, RunConfig};
use crate::error::CliError;
use crate::output::{self, Artifact};

#[derive(Debug, Serialize)]
struct EstimateOutput<'a> {
    n_units: usize,
    n_periods: usize,
    estimates: Vec<LabelledReport<'a>>,
}

#[derive(Debug, Serialize)]
pub(crate) struct LabelledReport<'a> {
    pub label: String,
    #[serde(flatten)]
    pub report: &'a EstimateReport,
}

/// One grid cell of a simulation study.
#[derive(Debug, Serialize)]
pub(crate) struct Cell {
    pub dgp: DgpSpec,
    pub results: Vec<McResult>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

pub fn run_estimate(cfg: &RunConfig) -> Result<Vec<Artifact>, CliError> {
    cfg.validate()?;
    let data = cfg.data.as_ref().expect("validated");
    let file = File::open(&data.path).map_err(|e| {
        CliError::Core(panel_dml::Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", data.path.display()),
        )))
    })?;
    let panel = load_panel(BufReader::new(file), data.schema.as_ref())?;
    log::info!(
        "loaded {} units over {} periods",
        panel.n_units(),
        panel.n_periods()
    );
    let crossfit = cfg.crossfit();
    let partition = crossfit.partition(panel.n_units())?;
    // every component must be feasible before any fitting starts
    for req in &cfg.estimands {
        for (t, s) in req.components() {
            crossfit.design(&panel, t, s)?;
        }
    }
    let estimators = cfg.estimator_specs()?;
    let reports = estimate_requests(&panel, &partition, &cfg.estimands, &estimators, &crossfit)?;

    let labels: Vec<String> = cfg.estimands.iter().map(|e| e.label()).collect();
    let names: Vec<String> = estimators.iter().map(|(n, _)| n.clone()).collect();
    let mut out = Vec::new();
    if cfg.wants(Format::Json) {
        let body = EstimateOutput {
            n_units: panel.n_units(),
            n_periods: panel.n_periods(),
            estimates: reports
                .iter()
                .zip(&labels)
                .flat_map(|(row, label)| {
                    row.iter().map(|r| LabelledReport {
                        label: label.clone(),
                        report: r,
                    })
                })
                .collect(),
        };
        out.push(Artifact::json("report.json", &body));
    }
    if cfg.wants(Format::Csv) {
        out.push(Artifact::new(
            "table.csv",
            output::estimate_csv(&labels, &reports),
        ));
    }
    if cfg.wants(Format::Txt) {
        out.push(Artifact::new(
            "table.txt",
            output::estimate_text(&labels, &names, &reports),
        ));
    }
    Ok(out)
}

pub fn run_simulate(cfg: &RunConfig) -> Result<Vec<Artifact>, CliError> {
    cfg.validate()?;
    let sim = cfg.simulation.as_ref().expect("validated");
    let estimators = cfg.estimator_specs()?;
    let mut cells = Vec::new();
    for dgp in cfg.grid()? {
        log::info!(
            "simulating {:?} with N = {}, L = {}",
            dgp.variant,
            dgp.n_units,
            dgp.n_covariates
        );
        let mc = McConfig {
            dgp,
            estimators: estimators.clone(),
            estimands: cfg.estimands.clone(),
            replications: sim.replications,
            crossfit: cfg.crossfit(),
        };
        let study = run_monte_carlo(&mc)?;
        cells.push(Cell {
            dgp,
            results: study.results,
            records: study.records,
        });
    }
    let labels: Vec<String> = cfg.estimands.iter().map(|e| e.label()).collect();
    let names: Vec<String> = estimators.iter().map(|(n, _)| n.clone()).collect();
    let mut out = Vec::new();
    if cfg.wants(Format::Json) {
        out.push(Artifact::json(
            "report.json",
            &serde_json::json!({ "cells": &cells }),
        ));
    }
    if cfg.wants(Format::Csv) {
        out.push(Artifact::new("table.csv", output::simulation_csv(&cells)));
        out.push(Artifact::new(
            "replications.csv",
            output::replications_csv(&cells),
        ));
    }
    if cfg.wants(Format::Txt) {
        out.push(Artifact::new(
            "table.txt",
            output::simulation_text(&cells, &labels, &names),
        ));
    }
    Ok(out)
}
