//! Cross-fitted estimation of average derivatives.
//!
//! For each held-out fold `k` the structural function `γ̂_k` and the
//! representer `α̂_k` are fitted on the estimation units (all folds except
//! `k` and its partner `k′`). Fold `k` then contributes, per unit,
//!
//! ```text
//! m_i + α̂_k(Z_i)·(ΔY*_i − Δγ̂*_k(V_i)),   m_i = ∂γ̂_k(V_it)/∂D_{i,t−s},
//! ```
//!
//! with the starred differences demeaned against fold `k′`. The debiased
//! estimate is the average of these; the plug-in estimate keeps only `m_i`.
//! Both reductions run fold-major with units ascending, so results are
//! bit-reproducible regardless of how the per-fold fits were scheduled.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{split_folds, FoldPartition, PanelDataset};
use crate::design::{take, take_rows, EstimandDesign, EstimationSet};
use crate::error::{Error, Result};
use crate::features::{
    build_dictionary, Dictionary, LagOrders, Model, Role, TermGenerator, VarSelector,
};
use crate::riesz::{
    estimate_riesz, prepare_dictionary, PenaltySpec, RieszEstimate, RieszSpec, SampleMoments,
};
use crate::seed::derive_seed;
use crate::solver::{
    cross_validate_penalty, inner_folds_by_id, penalty_grid, solve_quadratic, solve_quadratic_path,
    CvOutcome, LeastSquares, PenalizedSolution, QuadraticForm, SolveSummary, SolverOptions,
    Weighting,
};

/// Below this `Ψ̂` the standard error is reported as zero and flagged.
pub const DEGENERATE_VARIANCE: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMethod {
    /// Penalized GMM with instruments `b(Z)`.
    PenalizedGmm,
    /// L1 least squares of `ΔY*` on `Δdict*`; ignores endogeneity.
    Lasso,
    /// Unpenalized GMM (`r = 0`).
    Gmm,
}

fn yes() -> bool {
    true
}

/// First-stage specification. `regressors` are written against the `V_t`
/// layout, `instruments` relative to `t−s−1` like the representer's `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSpec {
    pub method: GammaMethod,
    pub regressors: Vec<TermGenerator>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instruments: Vec<TermGenerator>,
    #[serde(default)]
    pub penalty: PenaltySpec,
    #[serde(default = "yes")]
    pub standardize: bool,
}

impl GammaSpec {
    /// Cubic powers of `D_t`, `D_{t−1}`, `X_t` plus quadratic treatment ×
    /// covariate interactions at `t` and `t−1`; instruments are the analogous
    /// blocks at the two latest admissible periods.
    pub fn polynomial(method: GammaMethod) -> Self {
        let d0 = VarSelector::new(Role::Treatment, 0);
        let d1 = VarSelector::new(Role::Treatment, 1);
        let x0 = VarSelector::new(Role::Covariate, 0);
        let x1 = VarSelector::new(Role::Covariate, 1);
        let block = |powers: Vec<VarSelector>| {
            vec![
                TermGenerator::Powers {
                    vars: powers,
                    min_degree: 1,
                    max_degree: 3,
                },
                TermGenerator::Interactions {
                    left: vec![d0.clone()],
                    right: vec![x0.clone()],
                    left_degree: 2,
                    right_degree: 2,
                },
                TermGenerator::Interactions {
                    left: vec![d1.clone()],
                    right: vec![x1.clone()],
                    left_degree: 2,
                    right_degree: 2,
                },
            ]
        };
        let regressors = block(vec![d0.clone(), d1.clone(), x0.clone()]);
        let instruments = if method == GammaMethod::Lasso {
            vec![]
        } else {
            block(vec![d0.clone(), d1.clone(), x0.clone(), x1.clone()])
        };
        Self {
            method,
            regressors,
            instruments,
            penalty: PenaltySpec::default(),
            standardize: true,
        }
    }

    /// Linear-in-levels GMM: regressors `D_t, D_{t−1}, X_t`, instruments the
    /// treatment and covariates at the two latest admissible periods.
    pub fn linear() -> Self {
        let sel = |role, lag| VarSelector::new(role, lag);
        Self {
            method: GammaMethod::Gmm,
            regressors: vec![TermGenerator::Powers {
                vars: vec![
                    sel(Role::Treatment, 0),
                    sel(Role::Treatment, 1),
                    sel(Role::Covariate, 0),
                ],
                min_degree: 1,
                max_degree: 1,
            }],
            instruments: vec![TermGenerator::Powers {
                vars: vec![
                    sel(Role::Treatment, 0),
                    sel(Role::Treatment, 1),
                    sel(Role::Covariate, 0),
                    sel(Role::Covariate, 1),
                ],
                min_degree: 1,
                max_degree: 1,
            }],
            penalty: PenaltySpec::Fixed(0.0),
            standardize: true,
        }
    }

    fn effective_penalty(&self) -> PenaltySpec {
        match self.method {
            GammaMethod::Gmm => PenaltySpec::Fixed(0.0),
            _ => self.penalty,
        }
    }
}

/// Fitted `γ̂_k(v) = dict(v)'β`.
#[derive(Debug, Clone)]
pub struct GammaEstimate {
    pub beta: Array1<f64>,
    pub dictionary: Dictionary,
    pub method: GammaMethod,
    pub fold_index: usize,
    pub solution: SolveSummary,
    pub cv: Option<CvOutcome>,
}

impl GammaEstimate {
    pub fn eval_rows(&self, v: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.dictionary.eval_rows(v)?.dot(&self.beta))
    }

    pub fn derivative_rows(
        &self,
        v: ArrayView2<'_, f64>,
        design: &EstimandDesign,
    ) -> Result<Array1<f64>> {
        Ok(self
            .dictionary
            .eval_derivative_rows(v, &design.target)?
            .dot(&self.beta))
    }
}

fn method_tag(m: GammaMethod) -> &'static str {
    match m {
        GammaMethod::PenalizedGmm => "penalized-gmm first stage",
        GammaMethod::Lasso => "lasso first stage",
        GammaMethod::Gmm => "gmm first stage",
    }
}

/// Fit `γ̂_k` on the estimation units of held-out fold `k`.
pub fn fit_gamma(
    design: &EstimandDesign,
    partition: &FoldPartition,
    k: usize,
    spec: &GammaSpec,
    cv_seed: u64,
    opts: &SolverOptions,
) -> Result<GammaEstimate> {
    let ctx = format!("{}, held-out fold {k}", method_tag(spec.method));
    let set = EstimationSet::new(partition, k)?;
    let v_now = take_rows(design.v_now.values.view(), &set.units);
    let v_base = take_rows(design.v_base.values.view(), &set.units);
    let dict = build_dictionary(&spec.regressors, &design.v_now.layout)?;
    let dict = prepare_dictionary(&dict, v_now.view(), spec.standardize)?;
    let delta = dict.eval_rows(v_now.view())? - dict.eval_rows(v_base.view())?;
    let x = set.demean(delta.view());
    let y = set.demean_vec(take(design.dy.view(), &set.units).view());
    let penalty = spec.effective_penalty();
    let (sol, cv) = match spec.method {
        GammaMethod::PenalizedGmm | GammaMethod::Gmm => {
            if spec.instruments.is_empty() {
                return Err(Error::config(format!("{ctx}: instruments are required")));
            }
            let shift = design.s as i64 + 1;
            let gens: Vec<TermGenerator> =
                spec.instruments.iter().map(|g| g.shifted(shift)).collect();
            let inst = build_dictionary(&gens, &design.z.layout)?;
            let z = take_rows(design.z.values.view(), &set.units);
            let inst = prepare_dictionary(&inst, z.view(), spec.standardize)?;
            let w = inst.eval_rows(z.view())?;
            let moments = SampleMoments::instrumental(w, x, y.view(), set.units.clone());
            moments.fit(&Weighting::Identity, &penalty, cv_seed, opts)
        }
        GammaMethod::Lasso => fit_least_squares(x, y, &set.units, &penalty, cv_seed, opts),
    }
    .map_err(|e| e.with_context(&ctx))?;
    let sol = sol.require_converged(&ctx)?;
    Ok(GammaEstimate {
        solution: sol.summary(),
        beta: sol.rho,
        dictionary: dict,
        method: spec.method,
        fold_index: k,
        cv,
    })
}

fn fit_least_squares(
    x: Array2<f64>,
    y: Array1<f64>,
    ids: &[usize],
    penalty: &PenaltySpec,
    cv_seed: u64,
    opts: &SolverOptions,
) -> Result<(PenalizedSolution, Option<CvOutcome>)> {
    penalty.validate()?;
    let full = LeastSquares { x, y };
    if !full.x.iter().chain(full.y.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric(
            "least-squares design has non-finite entries".into(),
        ));
    }
    let q = full.quadratic();
    match *penalty {
        PenaltySpec::Fixed(r) => Ok((solve_quadratic(&q, r, None, opts)?, None)),
        PenaltySpec::Cv(spec) => {
            let r_max = q.max_penalty();
            if r_max == 0.0 {
                return Ok((solve_quadratic(&q, 0.0, None, opts)?, None));
            }
            let grid = penalty_grid(r_max, spec.grid_size, spec.min_ratio);
            let folds = inner_folds_by_id(ids, spec.folds, cv_seed)?;
            let sub = |rows: &[usize]| LeastSquares {
                x: full.x.select(ndarray::Axis(0), rows),
                y: rows.iter().map(|&i| full.y[i]).collect(),
            };
            let builder = |train: &[usize], val: &[usize]| Ok((sub(train), sub(val)));
            let cv = cross_validate_penalty(&folds, ids.len(), builder, &grid, opts)?;
            let upto = cv
                .grid
                .iter()
                .position(|&r| r == cv.selected)
                .expect("on grid");
            let mut path = solve_quadratic_path(&q, &cv.grid[..=upto], opts)?;
            Ok((path.pop().expect("non-empty path"), Some(cv)))
        }
    }
}

/// Per-unit ingredients of held-out fold `k`, units ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPieces {
    pub fold: usize,
    pub units: Vec<usize>,
    /// `∂γ̂_k(V_it)/∂D_{i,t−s}`
    pub deriv: Array1<f64>,
    /// `ΔY*_it`, demeaned against `k′`.
    pub dy_star: Array1<f64>,
    /// `Δγ̂*_k(V_it)`, demeaned against `k′`.
    pub dgamma_star: Array1<f64>,
    /// `α̂_k(Z_it)`; zero for plug-in runs.
    pub alpha: Array1<f64>,
}

impl FoldPieces {
    pub fn residual(&self) -> Array1<f64> {
        &self.dy_star - &self.dgamma_star
    }
}

/// Evaluate the fitted nuisances on fold `k`.
pub fn fold_pieces(
    design: &EstimandDesign,
    partition: &FoldPartition,
    gamma: &GammaEstimate,
    riesz: Option<&RieszEstimate>,
) -> Result<FoldPieces> {
    let k = gamma.fold_index;
    let kp = partition.partner(k);
    let units = partition.fold(k).to_vec();
    let partner = partition.fold(kp);
    let dgamma = |u: &[usize]| -> Result<Array1<f64>> {
        let now = take_rows(design.v_now.values.view(), u);
        let base = take_rows(design.v_base.values.view(), u);
        Ok(gamma.eval_rows(now.view())? - gamma.eval_rows(base.view())?)
    };
    let mean = |a: &Array1<f64>| a.sum() / a.len() as f64;
    let dg_k = dgamma(&units)?;
    let dg_p = dgamma(partner)?;
    let dgamma_star = &dg_k - mean(&dg_p);
    let dy_k = take(design.dy.view(), &units);
    let dy_p = take(design.dy.view(), partner);
    let dy_star = &dy_k - mean(&dy_p);
    let v_k = take_rows(design.v_now.values.view(), &units);
    let deriv = gamma.derivative_rows(v_k.view(), design)?;
    let alpha = match riesz {
        Some(r) => {
            if r.fold_index != k {
                return Err(Error::domain(format!(
                    "representer for fold {} used on fold {k}",
                    r.fold_index
                )));
            }
            r.eval_rows(take_rows(design.z.values.view(), &units).view())?
        }
        None => Array1::zeros(units.len()),
    };
    Ok(FoldPieces {
        fold: k,
        units,
        deriv,
        dy_star,
        dgamma_star,
        alpha,
    })
}

/// Point estimate, `Ψ̂` and per-unit influence values.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSummary {
    pub point: f64,
    pub psi: f64,
    /// Indexed by unit.
    pub influence: Array1<f64>,
}

fn check_pieces(pieces: &[FoldPieces], n: usize) -> Result<()> {
    let total: usize = pieces.iter().map(|p| p.units.len()).sum();
    if total != n {
        return Err(Error::Shape {
            expected: n,
            actual: total,
        });
    }
    Ok(())
}

/// `θ̂ᵈ` with the variance of the influence values
/// `m_i − θ̂ᵈ + (α̂_i − mean_{F_k} α̂)(ΔY*_i − Δγ̂*_i)`.
pub fn debiased_from_pieces(pieces: &[FoldPieces], n: usize) -> Result<InfluenceSummary> {
    check_pieces(pieces, n)?;
    let mut total = 0.0;
    for p in pieces {
        for j in 0..p.units.len() {
            total += p.deriv[j] + p.alpha[j] * (p.dy_star[j] - p.dgamma_star[j]);
        }
    }
    let point = total / n as f64;
    let mut influence = Array1::zeros(n);
    let mut psi = 0.0;
    for p in pieces {
        let abar = p.alpha.sum() / p.alpha.len() as f64;
        for (j, &i) in p.units.iter().enumerate() {
            let v = p.deriv[j] - point + (p.alpha[j] - abar) * (p.dy_star[j] - p.dgamma_star[j]);
            influence[i] = v;
            psi += v * v;
        }
    }
    Ok(InfluenceSummary {
        point,
        psi: psi / n as f64,
        influence,
    })
}

/// `θ̂ᵖ` with the naive variance `Σ(m_i − θ̂ᵖ)²/N`.
pub fn plugin_from_pieces(pieces: &[FoldPieces], n: usize) -> Result<InfluenceSummary> {
    check_pieces(pieces, n)?;
    let mut total = 0.0;
    for p in pieces {
        for &m in p.deriv.iter() {
            total += m;
        }
    }
    let point = total / n as f64;
    let mut influence = Array1::zeros(n);
    let mut psi = 0.0;
    for p in pieces {
        for (j, &i) in p.units.iter().enumerate() {
            let v = p.deriv[j] - point;
            influence[i] = v;
            psi += v * v;
        }
    }
    Ok(InfluenceSummary {
        point,
        psi: psi / n as f64,
        influence,
    })
}

/// Settings shared by every estimand of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossFitConfig {
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lags")]
    pub lags: LagOrders,
    #[serde(default)]
    pub model: Model,
    /// Covariate columns admitted into `Z`; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exogenous: Option<Vec<usize>>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn default_folds() -> usize {
    5
}

fn default_lags() -> LagOrders {
    LagOrders { q: 1, p: 0 }
}

fn default_level() -> f64 {
    0.95
}

impl Default for CrossFitConfig {
    fn default() -> Self {
        Self {
            folds: default_folds(),
            seed: 0,
            lags: default_lags(),
            model: Model::Static,
            exogenous: None,
            level: default_level(),
            solver: SolverOptions::default(),
        }
    }
}

impl CrossFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::config(format!(
                "confidence level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if self.solver.tol.is_nan() || self.solver.tol <= 0.0 || self.solver.max_iter == 0 {
            return Err(Error::config(
                "solver tol must be positive and max_iter at least 1",
            ));
        }
        Ok(())
    }

    /// Folds drawn from the run seed.
    pub fn partition(&self, n_units: usize) -> Result<FoldPartition> {
        split_folds(n_units, self.folds, derive_seed(self.seed, 0xF01D))
    }

    pub fn design(&self, panel: &PanelDataset, t: usize, s: usize) -> Result<EstimandDesign> {
        let all: Vec<usize> = (0..panel.n_covariates()).collect();
        let exo = self.exogenous.as_deref().unwrap_or(&all);
        EstimandDesign::new(panel, t, s, self.lags, self.model, exo)
    }

    /// Inner cross-validation seed for held-out fold `k`. Keyed by the
    /// smallest unit of the fold so relabelling folds does not change it.
    pub fn cv_seed(&self, partition: &FoldPartition, k: usize, stream: u64) -> u64 {
        let anchor = partition.fold(k).first().copied().unwrap_or(0) as u64;
        derive_seed(derive_seed(self.seed, stream), anchor)
    }
}

const GAMMA_STREAM: u64 = 0x6A;
const RIESZ_STREAM: u64 = 0xA1;

/// A first stage plus, for debiased estimators, a representer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub gamma: GammaSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riesz: Option<RieszSpec>,
}

impl EstimatorSpec {
    pub fn is_debiased(&self) -> bool {
        self.riesz.is_some()
    }
}

/// The six estimator configurations compared in simulation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "DPGMM", alias = "dpgmm")]
    Dpgmm,
    #[serde(rename = "PGMM", alias = "pgmm")]
    Pgmm,
    #[serde(rename = "DGMM", alias = "dgmm")]
    Dgmm,
    #[serde(rename = "GMM", alias = "gmm")]
    Gmm,
    #[serde(rename = "DLasso", alias = "dlasso", alias = "DLASSO")]
    Dlasso,
    #[serde(rename = "Lasso", alias = "lasso", alias = "LASSO")]
    Lasso,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Dpgmm,
        Preset::Pgmm,
        Preset::Dgmm,
        Preset::Gmm,
        Preset::Dlasso,
        Preset::Lasso,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Dpgmm => "DPGMM",
            Preset::Pgmm => "PGMM",
            Preset::Dgmm => "DGMM",
            Preset::Gmm => "GMM",
            Preset::Dlasso => "DLasso",
            Preset::Lasso => "Lasso",
        }
    }

    pub fn is_debiased(self) -> bool {
        matches!(self, Preset::Dpgmm | Preset::Dgmm | Preset::Dlasso)
    }

    pub fn spec(self) -> EstimatorSpec {
        let gamma = match self {
            Preset::Dpgmm | Preset::Pgmm => GammaSpec::polynomial(GammaMethod::PenalizedGmm),
            Preset::Dgmm | Preset::Gmm => GammaSpec::linear(),
            Preset::Dlasso | Preset::Lasso => GammaSpec::polynomial(GammaMethod::Lasso),
        };
        EstimatorSpec {
            gamma,
            riesz: self.is_debiased().then(RieszSpec::standard),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown estimator preset '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimand {
    /// `θ_t(s)`.
    Effect { t: usize, s: usize },
    /// `Σ_j w_j θ_{t_j}(s_j)`.
    Aggregate {
        components: Vec<(usize, usize)>,
        weights: Vec<f64>,
    },
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimand::Effect { t, s } => write!(f, "theta_{t}({s})"),
            Estimand::Aggregate {
                components,
                weights,
            } => {
                let parts: Vec<String> = components
                    .iter()
                    .zip(weights)
                    .map(|((t, s), w)| format!("{w}*theta_{t}({s})"))
                    .collect();
                write!(f, "{}", parts.join(" + "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub gamma: SolveSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riesz: Option<SolveSummary>,
    /// Degenerate (constant on the estimation units) representer terms.
    #[serde(default)]
    pub riesz_degenerate_terms: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub debiased: bool,
    /// `Ψ̂` fell below the degeneracy floor; the standard error is zero.
    pub degenerate_variance: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<FoldDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: Estimand,
    pub estimator: String,
    pub point: f64,
    pub std_error: f64,
    pub ci: (f64, f64),
    pub level: f64,
    pub n: usize,
    pub diagnostics: Diagnostics,
    /// Per-unit influence values; kept in memory for aggregation only.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

/// Two-sided normal critical value for `level`.
pub fn z_critical(level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

impl EstimateReport {
    pub fn from_summary(
        estimand: Estimand,
        estimator: impl Into<String>,
        summary: InfluenceSummary,
        level: f64,
        mut diagnostics: Diagnostics,
    ) -> Self {
        let n = summary.influence.len();
        let degenerate = summary.psi.is_nan() || summary.psi < DEGENERATE_VARIANCE;
        if degenerate {
            log::warn!(
                "variance estimate {:e} below floor; reporting zero standard error",
                summary.psi
            );
        }
        diagnostics.degenerate_variance = degenerate;
        let std_error = if degenerate {
            0.0
        } else {
            (summary.psi / n as f64).sqrt()
        };
        let half = z_critical(level) * std_error;
        Self {
            estimand,
            estimator: estimator.into(),
            point: summary.point,
            std_error,
            ci: (summary.point - half, summary.point + half),
            level,
            n,
            diagnostics,
            influence: summary.influence.to_vec(),
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }
}

/// Per-fold nuisance fits for one estimand.
#[derive(Debug, Clone)]
pub struct FoldFit {
    pub gamma: GammaEstimate,
    pub riesz: Option<RieszEstimate>,
}

impl FoldFit {
    fn diagnostics(&self) -> FoldDiagnostics {
        FoldDiagnostics {
            fold: self.gamma.fold_index,
            gamma: self.gamma.solution,
            riesz: self.riesz.as_ref().map(|r| r.solution),
            riesz_degenerate_terms: self
                .riesz
                .as_ref()
                .map_or(0, |r| r.dictionary.degenerate_terms().len()),
        }
    }
}

/// Fit `γ̂_k` for every held-out fold.
pub fn fit_gamma_all(
    design: &EstimandDesign,
    partition: &FoldPartition,
    spec: &GammaSpec,
    cfg: &CrossFitConfig,
) -> Result<Vec<GammaEstimate>> {
    (0..partition.k())
        .into_par_iter()
        .map(|k| {
            log::debug!("theta_{}({}): first stage, fold {k}", design.t, design.s);
            fit_gamma(
                design,
                partition,
                k,
                spec,
                cfg.cv_seed(partition, k, GAMMA_STREAM),
                &cfg.solver,
            )
        })
        .collect()
}

/// Fit `α̂_k` for every held-out fold.
pub fn fit_riesz_all(
    design: &EstimandDesign,
    partition: &FoldPartition,
    spec: &RieszSpec,
    cfg: &CrossFitConfig,
) -> Result<Vec<RieszEstimate>> {
    (0..partition.k())
        .into_par_iter()
        .map(|k| {
            log::debug!("theta_{}({}): representer, fold {k}", design.t, design.s);
            estimate_riesz(
                design,
                partition,
                k,
                spec,
                cfg.cv_seed(partition, k, RIESZ_STREAM),
                &cfg.solver,
            )
        })
        .collect()
}

/// Evaluate already-fitted nuisances on their held-out folds.
pub fn pieces_from_fits(
    design: &EstimandDesign,
    partition: &FoldPartition,
    gammas: &[GammaEstimate],
    rieszes: Option<&[RieszEstimate]>,
) -> Result<Vec<FoldPieces>> {
    if gammas.len() != partition.k() || rieszes.is_some_and(|r| r.len() != partition.k()) {
        return Err(Error::Shape {
            expected: partition.k(),
            actual: gammas.len(),
        });
    }
    (0..partition.k())
        .map(|k| fold_pieces(design, partition, &gammas[k], rieszes.map(|r| &r[k])))
        .collect()
}

/// Assemble a report from fitted nuisances.
pub fn report_from_fits(
    design: &EstimandDesign,
    partition: &FoldPartition,
    gammas: &[GammaEstimate],
    rieszes: Option<&[RieszEstimate]>,
    estimator: &str,
    level: f64,
) -> Result<EstimateReport> {
    let pieces = pieces_from_fits(design, partition, gammas, rieszes)?;
    let n = partition.n_units();
    let debiased = rieszes.is_some();
    let summary = if debiased {
        debiased_from_pieces(&pieces, n)?
    } else {
        plugin_from_pieces(&pieces, n)?
    };
    let folds = (0..partition.k())
        .map(|k| {
            FoldFit {
                gamma: gammas[k].clone(),
                riesz: rieszes.map(|r| r[k].clone()),
            }
            .diagnostics()
        })
        .collect();
    Ok(EstimateReport::from_summary(
        Estimand::Effect {
            t: design.t,
            s: design.s,
        },
        estimator,
        summary,
        level,
        Diagnostics {
            debiased,
            degenerate_variance: false,
            folds,
        },
    ))
}

/// Debiased `θ̂ᵈ_t(s)`.
pub fn debiased_theta(
    panel: &PanelDataset,
    partition: &FoldPartition,
    t: usize,
    s: usize,
    gamma: &GammaSpec,
    riesz: &RieszSpec,
    cfg: &CrossFitConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let design = cfg.design(panel, t, s)?;
    let gammas = fit_gamma_all(&design, partition, gamma, cfg)?;
    let rieszes = fit_riesz_all(&design, partition, riesz, cfg)?;
    report_from_fits(
        &design,
        partition,
        &gammas,
        Some(&rieszes),
        "debiased",
        cfg.level,
    )
}

/// Plug-in `θ̂ᵖ_t(s)`.
pub fn plugin_theta(
    panel: &PanelDataset,
    partition: &FoldPartition,
    t: usize,
    s: usize,
    gamma: &GammaSpec,
    cfg: &CrossFitConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let design = cfg.design(panel, t, s)?;
    let gammas = fit_gamma_all(&design, partition, gamma, cfg)?;
    report_from_fits(&design, partition, &gammas, None, "plug-in", cfg.level)
}

/// Every `(estimand, estimator)` pair, sharing nuisance fits between
/// estimators with identical first stages or representers. Result is
/// indexed `[estimand][estimator]`.
pub fn estimate_all(
    panel: &PanelDataset,
    partition: &FoldPartition,
    estimands: &[(usize, usize)],
    estimators: &[(String, EstimatorSpec)],
    cfg: &CrossFitConfig,
) -> Result<Vec<Vec<EstimateReport>>> {
    cfg.validate()?;
    // lag feasibility for everything before any fitting
    let designs = estimands
        .iter()
        .map(|&(t, s)| cfg.design(panel, t, s))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(designs.len());
    for design in &designs {
        log::info!("estimating theta_{}({})", design.t, design.s);
        let mut gamma_cache: Vec<(&GammaSpec, Vec<GammaEstimate>)> = Vec::new();
        let mut riesz_cache: Vec<(&RieszSpec, Vec<RieszEstimate>)> = Vec::new();
        let mut row = Vec::with_capacity(estimators.len());
        for (name, spec) in estimators {
            let gi = match gamma_cache.iter().position(|(g, _)| *g == &spec.gamma) {
                Some(i) => i,
                None => {
                    gamma_cache.push((
                        &spec.gamma,
                        fit_gamma_all(design, partition, &spec.gamma, cfg)?,
                    ));
                    gamma_cache.len() - 1
                }
            };
            let ri = match &spec.riesz {
                None => None,
                Some(r) => Some(match riesz_cache.iter().position(|(c, _)| *c == r) {
                    Some(i) => i,
                    None => {
                        riesz_cache.push((r, fit_riesz_all(design, partition, r, cfg)?));
                        riesz_cache.len() - 1
                    }
                }),
            };
            row.push(report_from_fits(
                design,
                partition,
                &gamma_cache[gi].1,
                ri.map(|i| riesz_cache[i].1.as_slice()),
                name,
                cfg.level,
            )?);
        }
        out.push(row);
    }
    Ok(out)
}

/// `Σ_j w_j θ̂_j` with standard error `sqrt(w'Σ̂w/N)`, `Σ̂ = E_n[ψ_i ψ_i']`
/// over the stacked per-unit influence values. The diagonal of `Σ̂` is each
/// component's own `Ψ̂`, so a one-hot weight reproduces that component.
pub fn aggregate(
    reports: &[EstimateReport],
    weights: &[f64],
    level: f64,
) -> Result<EstimateReport> {
    if reports.is_empty() {
        return Err(Error::config("aggregation needs at least one component"));
    }
    if weights.len() != reports.len() {
        return Err(Error::config(format!(
            "{} weights for {} components",
            weights.len(),
            reports.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::config("weights must be finite"));
    }
    let n = reports[0].n;
    if reports.iter().any(|r| r.n != n || r.influence.len() != n) {
        return Err(Error::config(
            "components must share one partition and carry per-unit influence values",
        ));
    }
    let mut components = Vec::new();
    for r in reports {
        match r.estimand {
            Estimand::Effect { t, s } => components.push((t, s)),
            Estimand::Aggregate { .. } => {
                return Err(Error::config("cannot aggregate already aggregated reports"))
            }
        }
    }
    let point: f64 = reports.iter().zip(weights).map(|(r, w)| w * r.point).sum();
    let influence: Array1<f64> = (0..n)
        .map(|i| {
            reports
                .iter()
                .zip(weights)
                .map(|(r, w)| w * r.influence[i])
                .sum()
        })
        .collect();
    let psi = influence.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let debiased = reports.iter().all(|r| r.diagnostics.debiased);
    let name = reports[0].estimator.clone();
    Ok(EstimateReport::from_summary(
        Estimand::Aggregate {
            components,
            weights: weights.to_vec(),
        },
        name,
        InfluenceSummary {
            point,
            psi,
            influence,
        },
        level,
        Diagnostics {
            debiased,
            ..Default::default()
        },
    ))
}

/// Weighted sum over lags `s` at a common period `t`.
pub fn aggregate_over_lags(
    reports: &[EstimateReport],
    weights: &[f64],
    level: f64,
) -> Result<EstimateReport> {
    let periods: Vec<usize> = reports
        .iter()
        .filter_map(|r| match r.estimand {
            Estimand::Effect { t, .. } => Some(t),
            _ => None,
        })
        .collect();
    if periods.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::config(
            "lag aggregation needs components at one period",
        ));
    }
    aggregate(reports, weights, level)
}

/// Weighted sum over periods `t` at a common lag `s`.
pub fn aggregate_over_periods(
    reports: &[EstimateReport],
    weights: &[f64],
    level: f64,
) -> Result<EstimateReport> {
    let lags: Vec<usize> = reports
        .iter()
        .filter_map(|r| match r.estimand {
            Estimand::Effect { s, .. } => Some(s),
            _ => None,
        })
        .collect();
    if lags.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::config(
            "period aggregation needs components at one lag",
        ));
    }
    aggregate(reports, weights, level)
}

/// A requested estimand: a single effect or a weighted aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EstimandRequest {
    /// `θ_t(s)`.
    Effect { t: usize, s: usize },
    /// `Σ_j w_j θ_t(s_j)`.
    OverLags {
        t: usize,
        lags: Vec<usize>,
        weights: Vec<f64>,
    },
    /// `Σ_j w_j θ_{t_j}(s)`.
    OverPeriods {
        periods: Vec<usize>,
        s: usize,
        weights: Vec<f64>,
    },
}

impl EstimandRequest {
    pub fn components(&self) -> Vec<(usize, usize)> {
        match self {
            EstimandRequest::Effect { t, s } => vec![(*t, *s)],
            EstimandRequest::OverLags { t, lags, .. } => lags.iter().map(|&s| (*t, s)).collect(),
            EstimandRequest::OverPeriods { periods, s, .. } => {
                periods.iter().map(|&t| (t, *s)).collect()
            }
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match self {
            EstimandRequest::Effect { .. } => vec![1.0],
            EstimandRequest::OverLags { weights, .. }
            | EstimandRequest::OverPeriods { weights, .. } => weights.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.components().len();
        if n == 0 {
            return Err(Error::config(
                "aggregate estimand needs at least one component",
            ));
        }
        if self.weights().len() != n {
            return Err(Error::config(format!(
                "aggregate has {n} components but {} weights",
                self.weights().len()
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            EstimandRequest::Effect { t, s } => format!("theta_{t}({s})"),
            _ => {
                let parts: Vec<String> = self
                    .components()
                    .iter()
                    .zip(self.weights())
                    .map(|((t, s), w)| format!("{w}*theta_{t}({s})"))
                    .collect();
                parts.join(" + ")
            }
        }
    }
}

/// Estimate every request with every estimator, fitting each distinct
/// component `(t, s)` once. Result is indexed `[request][estimator]`.
pub fn estimate_requests(
    panel: &PanelDataset,
    partition: &FoldPartition,
    requests: &[EstimandRequest],
    estimators: &[(String, EstimatorSpec)],
    cfg: &CrossFitConfig,
) -> Result<Vec<Vec<EstimateReport>>> {
    for r in requests {
        r.validate()?;
    }
    let mut components: Vec<(usize, usize)> = Vec::new();
    for r in requests {
        for c in r.components() {
            if !components.contains(&c) {
                components.push(c);
            }
        }
    }
    let base = estimate_all(panel, partition, &components, estimators, cfg)?;
    requests
        .iter()
        .map(|req| {
            let idx: Vec<usize> = req
                .components()
                .iter()
                .map(|c| components.iter().position(|x| x == c).expect("collected"))
                .collect();
            (0..estimators.len())
                .map(|e| match req {
                    EstimandRequest::Effect { .. } => Ok(base[idx[0]][e].clone()),
                    EstimandRequest::OverLags { .. } => {
                        let parts: Vec<EstimateReport> =
                            idx.iter().map(|&i| base[i][e].clone()).collect();
                        aggregate_over_lags(&parts, &req.weights(), cfg.level)
                    }
                    EstimandRequest::OverPeriods { .. } => {
                        let parts: Vec<EstimateReport> =
                            idx.iter().map(|&i| base[i][e].clone()).collect();
                        aggregate_over_periods(&parts, &req.weights(), cfg.level)
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pieces() -> Vec<FoldPieces> {
        vec![
            FoldPieces {
                fold: 0,
                units: vec![0, 2],
                deriv: array![1.0, 3.0],
                dy_star: array![0.5, -0.5],
                dgamma_star: array![0.25, 0.0],
                alpha: array![2.0, 1.0],
            },
            FoldPieces {
                fold: 1,
                units: vec![1, 3],
                deriv: array![2.0, 2.0],
                dy_star: array![1.0, 0.0],
                dgamma_star: array![0.0, 1.0],
                alpha: array![-1.0, 1.0],
            },
        ]
    }

    #[test]
    fn debiased_hand_computed() {
        let s = debiased_from_pieces(&pieces(), 4).unwrap();
        // m + α·r: 1 + 0.5, 3 − 0.5, 2 − 1, 2 − 1
        assert!((s.point - 6.0 / 4.0).abs() < 1e-15);
        // centred α: fold0 (0.5, −0.5), fold1 (−1, 1)
        let expect = [
            1.0 - 1.5 + 0.5 * 0.25,
            2.0 - 1.5 - 1.0 * 1.0,
            3.0 - 1.5 + 0.5 * 0.5,
            2.0 - 1.5 - 1.0,
        ];
        for (got, want) in s.influence.iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        let psi: f64 = expect.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((s.psi - psi).abs() < 1e-15);
    }

    #[test]
    fn zero_alpha_is_plugin() {
        let mut p = pieces();
        for f in &mut p {
            f.alpha.fill(0.0);
        }
        let d = debiased_from_pieces(&p, 4).unwrap();
        let q = plugin_from_pieces(&p, 4).unwrap();
        assert_eq!(d.point.to_bits(), q.point.to_bits());
        assert_eq!(d.influence, q.influence);
    }

    #[test]
    fn zero_residual_constant_derivative_has_zero_variance() {
        let p = vec![
            FoldPieces {
                fold: 0,
                units: vec![0, 1],
                deriv: array![2.0, 2.0],
                dy_star: array![0.3, 0.1],
                dgamma_star: array![0.3, 0.1],
                alpha: array![5.0, -1.0],
            },
            FoldPieces {
                fold: 1,
                units: vec![2],
                deriv: array![2.0],
                dy_star: array![0.0],
                dgamma_star: array![0.0],
                alpha: array![1.0],
            },
        ];
        let s = debiased_from_pieces(&p, 3).unwrap();
        assert_eq!(s.psi, 0.0);
        let r = EstimateReport::from_summary(
            Estimand::Effect { t: 3, s: 0 },
            "x",
            s,
            0.95,
            Diagnostics::default(),
        );
        assert_eq!(r.std_error, 0.0);
        assert!(r.diagnostics.degenerate_variance);
        assert_eq!(r.ci, (2.0, 2.0));
    }

    fn report(t: usize, s: usize, point: f64, influence: Vec<f64>) -> EstimateReport {
        let n = influence.len();
        let psi = influence.iter().map(|v| v * v).sum::<f64>() / n as f64;
        EstimateReport::from_summary(
            Estimand::Effect { t, s },
            "x",
            InfluenceSummary {
                point,
                psi,
                influence: Array1::from(influence),
            },
            0.95,
            Diagnostics::default(),
        )
    }

    #[test]
    fn ci_recomputes_from_point_and_se() {
        let r = report(5, 0, 1.25, vec![1.0, -2.0, 0.5, 0.5]);
        let z = z_critical(0.95);
        assert!((z - 1.959963984540054).abs() < 1e-12);
        assert_eq!(r.ci, (r.point - z * r.std_error, r.point + z * r.std_error));
    }

    #[test]
    fn aggregation_identities() {
        let a = report(10, 0, 3.0, vec![1.0, -1.0, 2.0, 0.0]);
        let b = report(10, 1, 1.5, vec![0.5, 0.5, -1.0, 0.0]);
        let one = aggregate_over_lags(std::slice::from_ref(&a), &[1.0], 0.95).unwrap();
        assert_eq!(one.point, a.point);
        assert_eq!(one.std_error, a.std_error);
        let hot = aggregate_over_lags(&[a.clone(), b.clone()], &[0.0, 1.0], 0.95).unwrap();
        assert_eq!(hot.point, b.point);
        assert!((hot.std_error - b.std_error).abs() < 1e-15);
        let half = aggregate_over_lags(&[a.clone(), b.clone()], &[0.5, 0.5], 0.95).unwrap();
        assert!((half.point - 2.25).abs() < 1e-15);
        // perfectly correlated components
        let c = report(10, 1, 2.0, a.influence.clone());
        let both = aggregate_over_lags(&[a.clone(), c], &[0.3, 0.7], 0.95).unwrap();
        assert!((both.std_error - a.std_error).abs() < 1e-15);
        assert!(aggregate_over_lags(&[a.clone(), b.clone()], &[1.0], 0.95).is_err());
        assert!(aggregate_over_periods(&[a, b], &[0.5, 0.5], 0.95).is_err());
    }

    #[test]
    fn presets_roundtrip_names() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            assert_eq!(p.spec().is_debiased(), p.is_debiased());
        }
        assert!("foo".parse::<Preset>().is_err());
    }
}
