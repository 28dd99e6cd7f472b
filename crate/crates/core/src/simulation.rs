//! Synthetic panels with known average derivatives and a Monte Carlo harness.
//!
//! Both designs share the noise structure: `α_i, λ_t, ε_it ~ N(0, 1)`,
//! `X_itl = ε^X_itl + 0.5 ε_{i,t−1}` with `ε^X_itl ~ N(α_i, 1)`, and
//! `ε^D_it ~ N(1, 1)`. A burn-in period `t = 0` (with `ε_{i,−1} = ε_{i0} = 0`)
//! supplies the lagged treatment needed by the outcome at `t = 1`.
//!
//! * `Dgp1`: `D = X'ξ + ε^D` with `ξ_l = l⁻²`, and
//!   `Y = D + D² + D X₁ + 0.5 D₋₁ + 0.5 D₋₁² + 0.5 D₋₁ X₋₁,₁ + X'ξ + α + λ + ε`.
//! * `Dgp2`: `D = X₁/2 − X₂/3 + X₃/4 + ε^D`, and
//!   `Y = D + D² + D₋₁ + D X₁ + X₁²/2 − cos X₂/3 + tanh X₃/4 − exp X₄/5 + α + λ + ε`.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_requests, CrossFitConfig, EstimandRequest, EstimateReport, EstimatorSpec,
};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpVariant {
    Dgp1,
    Dgp2,
}

fn default_periods() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub variant: DgpVariant,
    pub n_units: usize,
    #[serde(default = "default_periods")]
    pub n_periods: usize,
    pub n_covariates: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_units < 2 || self.n_periods < 2 {
            return Err(Error::config(
                "simulation needs at least two units and two periods",
            ));
        }
        match self.variant {
            DgpVariant::Dgp1 if self.n_covariates < 1 => {
                Err(Error::config("dgp1 needs at least one covariate"))
            }
            DgpVariant::Dgp2 if self.n_covariates < 4 => Err(Error::config(format!(
                "dgp2 uses covariates 1-4 but only {} requested",
                self.n_covariates
            ))),
            _ => Ok(()),
        }
    }

    /// True `θ_t(s)`; the same for every period.
    pub fn truth(&self, s: usize) -> f64 {
        match (self.variant, s) {
            (_, 0) => 3.0,
            (DgpVariant::Dgp1, 1) => 1.5,
            (DgpVariant::Dgp2, 1) => 1.0,
            _ => 0.0,
        }
    }

    pub fn truth_of(&self, request: &EstimandRequest) -> f64 {
        request
            .components()
            .iter()
            .zip(request.weights())
            .map(|(&(_, s), w)| w * self.truth(s))
            .sum()
    }
}

/// Standard-normal draws behind one panel; index 0 of the time axis is the
/// burn-in period.
#[derive(Debug, Clone, PartialEq)]
pub struct Shocks {
    /// `N`
    pub alpha: Array1<f64>,
    /// `T` (periods `1..=T`)
    pub lambda: Array1<f64>,
    /// `N × (T+1)`; column 0 is unused (`ε_{i0} = 0`).
    pub eps: Array2<f64>,
    /// `N × (T+1) × L`, centred draws of `ε^X − α_i`.
    pub eps_x: Array3<f64>,
    /// `N × (T+1)`, centred draws of `ε^D − 1`.
    pub eps_d: Array2<f64>,
}

impl Shocks {
    pub fn zeros(n: usize, t: usize, l: usize) -> Self {
        Self {
            alpha: Array1::zeros(n),
            lambda: Array1::zeros(t),
            eps: Array2::zeros((n, t + 1)),
            eps_x: Array3::zeros((n, t + 1, l)),
            eps_d: Array2::zeros((n, t + 1)),
        }
    }

    /// Draw order: `λ_1..λ_T`, then unit by unit `α_i` followed, per period
    /// `0..=T`, by `ε^X_{i t 1..L}`, `ε^D_it` and (for `t ≥ 1`) `ε_it`.
    pub fn draw(spec: &DgpSpec) -> Self {
        let (n, t, l) = (spec.n_units, spec.n_periods, spec.n_covariates);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut z = || -> f64 { rng.sample(StandardNormal) };
        let mut out = Self::zeros(n, t, l);
        for p in 0..t {
            out.lambda[p] = z();
        }
        for i in 0..n {
            out.alpha[i] = z();
            for p in 0..=t {
                for c in 0..l {
                    out.eps_x[[i, p, c]] = z();
                }
                out.eps_d[[i, p]] = z();
                if p >= 1 {
                    out.eps[[i, p]] = z();
                }
            }
        }
        out
    }
}

fn xi(l: usize) -> Vec<f64> {
    (1..=l).map(|j| 1.0 / (j * j) as f64).collect()
}

/// Deterministic map from shocks to a panel.
pub fn build_panel(variant: DgpVariant, shocks: &Shocks) -> Result<PanelDataset> {
    let (n, tp1, l) = shocks.eps_x.dim();
    let t = tp1 - 1;
    if variant == DgpVariant::Dgp2 && l < 4 {
        return Err(Error::config("dgp2 needs at least four covariates"));
    }
    let xi = xi(l);
    let mut x = Array3::<f64>::zeros((n, tp1, l));
    let mut d = Array2::<f64>::zeros((n, tp1));
    let mut y = Array2::<f64>::zeros((n, t));
    for i in 0..n {
        let a = shocks.alpha[i];
        for p in 0..=t {
            // ε_{i,p−1}: zero for p ≤ 1
            let eps_prev = if p >= 2 { shocks.eps[[i, p - 1]] } else { 0.0 };
            for c in 0..l {
                x[[i, p, c]] = a + shocks.eps_x[[i, p, c]] + 0.5 * eps_prev;
            }
            let ed = 1.0 + shocks.eps_d[[i, p]];
            d[[i, p]] = match variant {
                DgpVariant::Dgp1 => (0..l).map(|c| xi[c] * x[[i, p, c]]).sum::<f64>() + ed,
                DgpVariant::Dgp2 => {
                    x[[i, p, 0]] / 2.0 - x[[i, p, 1]] / 3.0 + x[[i, p, 2]] / 4.0 + ed
                }
            };
        }
        for p in 1..=t {
            let (dn, dl) = (d[[i, p]], d[[i, p - 1]]);
            let (x1, x1l) = (x[[i, p, 0]], x[[i, p - 1, 0]]);
            let structural = match variant {
                DgpVariant::Dgp1 => {
                    let xx: f64 = (0..l).map(|c| xi[c] * x[[i, p, c]]).sum();
                    dn + dn * dn + dn * x1 + 0.5 * dl + 0.5 * dl * dl + 0.5 * dl * x1l + xx
                }
                DgpVariant::Dgp2 => {
                    let (x2, x3, x4) = (x[[i, p, 1]], x[[i, p, 2]], x[[i, p, 3]]);
                    dn + dn * dn + dl + dn * x1 + x1 * x1 / 2.0 - x2.cos() / 3.0 + x3.tanh() / 4.0
                        - x4.exp() / 5.0
                }
            };
            y[[i, p - 1]] = structural + a + shocks.lambda[p - 1] + shocks.eps[[i, p]];
        }
    }
    let d_obs = d.slice(ndarray::s![.., 1..]).to_owned();
    let x_obs = x.slice(ndarray::s![.., 1.., ..]).to_owned();
    PanelDataset::new(
        y,
        d_obs,
        x_obs,
        Array3::zeros((n, t, 0)),
        Array2::zeros((n, 0)),
    )
}

pub fn simulate(spec: &DgpSpec) -> Result<PanelDataset> {
    spec.validate()?;
    build_panel(spec.variant, &Shocks::draw(spec))
}

pub fn simulate_dgp1(spec: &DgpSpec) -> Result<PanelDataset> {
    if spec.variant != DgpVariant::Dgp1 {
        return Err(Error::config("simulate_dgp1 called with another variant"));
    }
    simulate(spec)
}

pub fn simulate_dgp2(spec: &DgpSpec) -> Result<PanelDataset> {
    if spec.variant != DgpVariant::Dgp2 {
        return Err(Error::config("simulate_dgp2 called with another variant"));
    }
    simulate(spec)
}

/// Summary statistics over replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMetrics {
    pub estimate_mean: f64,
    /// `|mean − truth|`
    pub bias: f64,
    /// Sample standard deviation (divisor `R − 1`; zero when `R = 1`).
    pub std_dev: f64,
    pub mse: f64,
    pub est_sd_mean: f64,
    pub coverage: f64,
}

/// Metrics from per-replication points, standard errors and coverage flags.
pub fn mc_metrics(
    estimates: &[f64],
    est_sds: &[f64],
    covered: &[bool],
    truth: f64,
) -> Result<McMetrics> {
    let r = estimates.len();
    if r == 0 || est_sds.len() != r || covered.len() != r {
        return Err(Error::config(
            "metrics need equally many (>= 1) estimates, SEs and coverage flags",
        ));
    }
    let rf = r as f64;
    let mean = estimates.iter().sum::<f64>() / rf;
    let ss: f64 = estimates.iter().map(|e| (e - mean) * (e - mean)).sum();
    let std_dev = if r > 1 { (ss / (rf - 1.0)).sqrt() } else { 0.0 };
    Ok(McMetrics {
        estimate_mean: mean,
        bias: (mean - truth).abs(),
        std_dev,
        mse: estimates
            .iter()
            .map(|e| (e - truth) * (e - truth))
            .sum::<f64>()
            / rf,
        est_sd_mean: est_sds.iter().sum::<f64>() / rf,
        coverage: covered.iter().filter(|c| **c).count() as f64 / rf,
    })
}

/// One Monte Carlo study: every estimator on every estimand over `R` draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    /// Its `seed` is the master seed of the study.
    pub dgp: DgpSpec,
    pub estimators: Vec<(String, EstimatorSpec)>,
    pub estimands: Vec<EstimandRequest>,
    pub replications: usize,
    #[serde(default)]
    pub crossfit: CrossFitConfig,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.crossfit.validate()?;
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        if self.estimators.is_empty() || self.estimands.is_empty() {
            return Err(Error::config(
                "need at least one estimator and one estimand",
            ));
        }
        for e in &self.estimands {
            e.validate()?;
        }
        Ok(())
    }

    /// Seed of replication `r`.
    pub fn replication_seed(&self, r: usize) -> u64 {
        derive_seed(self.dgp.seed, r as u64)
    }

    /// Run replication `r` alone; identical to its in-batch result.
    /// Indexed `[estimand][estimator]`.
    pub fn run_replication(&self, r: usize) -> Result<Vec<Vec<EstimateReport>>> {
        let seed = self.replication_seed(r);
        let dgp = DgpSpec {
            seed: derive_seed(seed, 1),
            ..self.dgp
        };
        let panel = simulate(&dgp)?;
        let cfg = CrossFitConfig {
            seed: derive_seed(seed, 2),
            ..self.crossfit.clone()
        };
        let partition = cfg.partition(panel.n_units())?;
        estimate_requests(&panel, &partition, &self.estimands, &self.estimators, &cfg)
    }
}

/// One row of `replications.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub estimator: String,
    pub estimand: String,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub estimator: String,
    pub estimand: String,
    pub truth: f64,
    pub replications: usize,
    /// Replications that failed and were left out of the metrics.
    pub failures: usize,
    pub estimates: Vec<f64>,
    pub est_sds: Vec<f64>,
    pub metrics: Option<McMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStudy {
    pub results: Vec<McResult>,
    pub records: Vec<ReplicationRecord>,
}

impl McStudy {
    pub fn result(&self, estimator: &str, estimand: &str) -> Option<&McResult> {
        self.results
            .iter()
            .find(|r| r.estimator == estimator && r.estimand == estimand)
    }
}

/// Run all replications (in parallel) and summarize. A failing replication
/// is recorded with its error and excluded from every metric.
pub fn run_monte_carlo(cfg: &McConfig) -> Result<McStudy> {
    cfg.validate()?;
    let outcomes: Vec<Result<Vec<Vec<EstimateReport>>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let out = cfg.run_replication(r);
            match &out {
                Ok(_) => log::info!("replication {} of {} done", r + 1, cfg.replications),
                Err(e) => log::warn!("replication {} failed: {e}", r + 1),
            }
            out
        })
        .collect();
    let truths: Vec<f64> = cfg.estimands.iter().map(|e| cfg.dgp.truth_of(e)).collect();
    let labels: Vec<String> = cfg.estimands.iter().map(EstimandRequest::label).collect();
    let mut records = Vec::new();
    for (r, out) in outcomes.iter().enumerate() {
        for (q, label) in labels.iter().enumerate() {
            for (e, (name, _)) in cfg.estimators.iter().enumerate() {
                let mut rec = ReplicationRecord {
                    replication: r,
                    seed: cfg.replication_seed(r),
                    estimator: name.clone(),
                    estimand: label.clone(),
                    truth: truths[q],
                    estimate: None,
                    std_error: None,
                    covered: None,
                    error: None,
                };
                match out {
                    Ok(reports) => {
                        let rep = &reports[q][e];
                        rec.estimate = Some(rep.point);
                        rec.std_error = Some(rep.std_error);
                        rec.covered = Some(rep.covers(truths[q]));
                    }
                    Err(err) => rec.error = Some(err.to_string()),
                }
                records.push(rec);
            }
        }
    }
    let mut results = Vec::new();
    for (q, label) in labels.iter().enumerate() {
        for (name, _) in &cfg.estimators {
            let rows: Vec<&ReplicationRecord> = records
                .iter()
                .filter(|x| &x.estimand == label && &x.estimator == name)
                .collect();
            let ok: Vec<&&ReplicationRecord> = rows.iter().filter(|x| x.error.is_none()).collect();
            let estimates: Vec<f64> = ok.iter().map(|x| x.estimate.expect("ok row")).collect();
            let est_sds: Vec<f64> = ok.iter().map(|x| x.std_error.expect("ok row")).collect();
            let covered: Vec<bool> = ok.iter().map(|x| x.covered.expect("ok row")).collect();
            let metrics = if estimates.is_empty() {
                None
            } else {
                Some(mc_metrics(&estimates, &est_sds, &covered, truths[q])?)
            };
            results.push(McResult {
                estimator: name.clone(),
                estimand: label.clone(),
                truth: truths[q],
                replications: cfg.replications,
                failures: rows.len() - ok.len(),
                estimates,
                est_sds,
                metrics,
            });
        }
    }
    Ok(McStudy { results, records })
}
