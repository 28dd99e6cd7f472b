//! Automatic Riesz representer: `α̂_k(Z) = b(Z)'ρ̂_k` with `ρ̂_k` from the
//! penalized moment problem
//!
//! ```text
//! Ĝ_k = E_n[Δd*(V) b(Z)'],   M̂_k = E_n[∂d(V_t)/∂D_{t−s}],
//! ρ̂_k = argmin (M̂_k − Ĝ_k ρ)'Ω(M̂_k − Ĝ_k ρ) + 2r‖ρ‖₁,
//! ```
//!
//! averaged over the estimation units of held-out fold `k`. `Δd*` demeans
//! each estimation fold against its successor inside the estimation set, so
//! nothing from folds `k` and `k′` enters the fit.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::FoldPartition;
use crate::design::{take_rows, EstimandDesign, EstimationSet};
use crate::error::{Error, Result};
use crate::features::{
    build_dictionary, fit_standardization, Dictionary, Role, TermGenerator, TermScale, VarSelector,
};
use crate::solver::{
    cross_validate_penalty, inner_folds_by_id, penalty_grid, solve_quadratic, solve_quadratic_path,
    CvOutcome, MomentSystem, PenalizedSolution, QuadraticForm, SolveSummary, SolverOptions,
    Weighting,
};

fn default_cv_folds() -> usize {
    5
}

fn default_grid_size() -> usize {
    50
}

fn default_min_ratio() -> f64 {
    1e-4
}

/// Cross-validated penalty choice over a log grid below `‖G'ΩM‖_∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSpec {
    #[serde(default = "default_cv_folds")]
    pub folds: usize,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_min_ratio")]
    pub min_ratio: f64,
}

impl Default for CvSpec {
    fn default() -> Self {
        Self {
            folds: default_cv_folds(),
            grid_size: default_grid_size(),
            min_ratio: default_min_ratio(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltySpec {
    /// Use this `r` as is.
    Fixed(f64),
    Cv(CvSpec),
}

impl Default for PenaltySpec {
    fn default() -> Self {
        PenaltySpec::Cv(CvSpec::default())
    }
}

impl PenaltySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PenaltySpec::Fixed(r) if !(r >= 0.0 && r.is_finite()) => Err(Error::config(format!(
                "fixed penalty must be finite and >= 0, got {r}"
            ))),
            PenaltySpec::Cv(c) if c.folds < 2 || c.grid_size == 0 => {
                Err(Error::config("cv needs folds >= 2 and a non-empty grid"))
            }
            PenaltySpec::Cv(c) if !(c.min_ratio > 0.0 && c.min_ratio < 1.0) => {
                Err(Error::config("cv min_ratio must lie in (0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-unit moment contributions: `G = mean_i w_i x_i'` and `M = mean_i m_i`.
#[derive(Debug, Clone)]
pub struct SampleMoments {
    /// `n × q`
    pub w: Array2<f64>,
    /// `n × p`
    pub x: Array2<f64>,
    /// `n × q`
    pub m: Array2<f64>,
    /// Unit id per row; fixes the cross-validation split.
    pub ids: Vec<usize>,
}

impl SampleMoments {
    /// Instrumental-variable moments `E_n[w (y − x'β)] = 0`, i.e. `m_i = w_i y_i`.
    pub fn instrumental(
        w: Array2<f64>,
        x: Array2<f64>,
        y: ArrayView1<'_, f64>,
        ids: Vec<usize>,
    ) -> Self {
        let m = &w * &y.insert_axis(Axis(1));
        Self { w, x, m, ids }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    fn sums(&self, rows: Option<&[usize]>) -> (Array2<f64>, Array1<f64>) {
        match rows {
            None => (self.w.t().dot(&self.x), self.m.sum_axis(Axis(0))),
            Some(r) => {
                let w = self.w.select(Axis(0), r);
                let x = self.x.select(Axis(0), r);
                let m = self.m.select(Axis(0), r);
                (w.t().dot(&x), m.sum_axis(Axis(0)))
            }
        }
    }

    pub fn system(&self, omega: &Weighting) -> MomentSystem {
        let n = self.n() as f64;
        let (g, m) = self.sums(None);
        MomentSystem::new(g / n, m / n).with_weighting(omega.clone())
    }

    /// Solve at a fixed or cross-validated penalty. The cross-validated fit
    /// follows the warm-started path from `r_max` down to the chosen point.
    pub fn fit(
        &self,
        omega: &Weighting,
        penalty: &PenaltySpec,
        cv_seed: u64,
        opts: &SolverOptions,
    ) -> Result<(PenalizedSolution, Option<CvOutcome>)> {
        penalty.validate()?;
        let full = self.system(omega);
        full.validate()?;
        let q = full.quadratic();
        match *penalty {
            PenaltySpec::Fixed(r) => Ok((solve_quadratic(&q, r, None, opts)?, None)),
            PenaltySpec::Cv(spec) => {
                let r_max = q.max_penalty();
                if r_max == 0.0 {
                    return Ok((solve_quadratic(&q, 0.0, None, opts)?, None));
                }
                let grid = penalty_grid(r_max, spec.grid_size, spec.min_ratio);
                let folds = inner_folds_by_id(&self.ids, spec.folds, cv_seed)?;
                let n = self.n();
                let (g_tot, m_tot) = self.sums(None);
                let builder =
                    |train: &[usize], val: &[usize]| -> Result<(MomentSystem, MomentSystem)> {
                        let (g_val, m_val) = self.sums(Some(val));
                        let nv = val.len() as f64;
                        let nt = train.len() as f64;
                        debug_assert_eq!(train.len() + val.len(), n);
                        let train_sys =
                            MomentSystem::new((&g_tot - &g_val) / nt, (&m_tot - &m_val) / nt)
                                .with_weighting(omega.clone());
                        let val_sys =
                            MomentSystem::new(g_val / nv, m_val / nv).with_weighting(omega.clone());
                        Ok((train_sys, val_sys))
                    };
                let cv = cross_validate_penalty(&folds, n, builder, &grid, opts)?;
                let upto = cv
                    .grid
                    .iter()
                    .position(|&r| r == cv.selected)
                    .expect("selected penalty is on the grid");
                let mut path = solve_quadratic_path(&q, &cv.grid[..=upto], opts)?;
                let sol = path.pop().expect("non-empty path");
                Ok((sol, Some(cv)))
            }
        }
    }
}

fn yes() -> bool {
    true
}

/// Dictionaries and tuning for the representer.
///
/// `d` is written against the `V_t` layout (lags back from `t`). `b` is
/// written relative to the last admissible instrument period `t−s−1` and is
/// shifted by `s+1` when bound, so one block serves every lag `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RieszSpec {
    pub b: Vec<TermGenerator>,
    pub d: Vec<TermGenerator>,
    #[serde(default)]
    pub penalty: PenaltySpec,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Moment weighting; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighting: Option<Vec<Vec<f64>>>,
}

impl RieszSpec {
    /// Third-order dictionaries over current and one-period-lagged treatment
    /// and covariates: `b` holds the intercept, powers `1..=3` and
    /// treatment × covariate interactions up to `3 × 3` at the two latest
    /// admissible periods; `d` is the full cubic in the four `V` blocks.
    pub fn standard() -> Self {
        let d0 = VarSelector::new(Role::Treatment, 0);
        let d1 = VarSelector::new(Role::Treatment, 1);
        let x0 = VarSelector::new(Role::Covariate, 0);
        let x1 = VarSelector::new(Role::Covariate, 1);
        Self {
            b: vec![
                TermGenerator::Intercept,
                TermGenerator::Powers {
                    vars: vec![d0.clone(), d1.clone(), x0.clone(), x1.clone()],
                    min_degree: 1,
                    max_degree: 3,
                },
                TermGenerator::Interactions {
                    left: vec![d0.clone()],
                    right: vec![x0.clone()],
                    left_degree: 3,
                    right_degree: 3,
                },
                TermGenerator::Interactions {
                    left: vec![d1.clone()],
                    right: vec![x1.clone()],
                    left_degree: 3,
                    right_degree: 3,
                },
            ],
            d: vec![TermGenerator::FullPoly {
                vars: vec![d0, d1, x0, x1],
                max_degree: 3,
            }],
            penalty: PenaltySpec::default(),
            standardize: true,
            weighting: None,
        }
    }

    pub fn omega(&self) -> Result<Weighting> {
        match &self.weighting {
            None => Ok(Weighting::Identity),
            Some(rows) => {
                let q = rows.len();
                if rows.iter().any(|r| r.len() != q) {
                    return Err(Error::config("weighting matrix must be square"));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                let w = Array2::from_shape_vec((q, q), flat).expect("square");
                Ok(Weighting::Matrix(w))
            }
        }
    }

    /// Bind `(b, d)` to the design's layouts (unfitted).
    pub fn dictionaries(&self, design: &EstimandDesign) -> Result<(Dictionary, Dictionary)> {
        let shift = design.s as i64 + 1;
        let b_gens: Vec<TermGenerator> = self.b.iter().map(|g| g.shifted(shift)).collect();
        let b = build_dictionary(&b_gens, &design.z.layout)?;
        let d = build_dictionary(&self.d, &design.v_now.layout)?;
        Ok((b, d))
    }
}

/// Standardize on `sample` unless already fitted; `standardize = false`
/// installs identity transforms.
pub(crate) fn prepare_dictionary(
    dict: &Dictionary,
    sample: ArrayView2<'_, f64>,
    standardize: bool,
) -> Result<Dictionary> {
    if dict.is_fitted() {
        Ok(dict.clone())
    } else if standardize {
        fit_standardization(dict.clone(), sample)
    } else {
        let n = dict.len();
        dict.clone()
            .with_standardization(vec![TermScale::IDENTITY; n])
    }
}

/// `Ĝ_k`, `M̂_k` and the per-unit pieces they average.
#[derive(Debug, Clone)]
pub struct RieszMoments {
    pub set: EstimationSet,
    pub b_dict: Dictionary,
    pub d_dict: Dictionary,
    /// Rows: `Δd*(V_it)` (as `w`), `b(Z_it)` (as `x`) and
    /// `∂d(V_it)/∂D_{i,t−s}` (as `m`), in `set.units` order.
    pub sample: SampleMoments,
}

impl RieszMoments {
    pub fn build(
        design: &EstimandDesign,
        partition: &FoldPartition,
        k: usize,
        b: &Dictionary,
        d: &Dictionary,
        standardize: bool,
    ) -> Result<Self> {
        if partition.n_units() != design.n_units() {
            return Err(Error::Shape {
                expected: design.n_units(),
                actual: partition.n_units(),
            });
        }
        let set = EstimationSet::new(partition, k)?;
        let v_now = take_rows(design.v_now.values.view(), &set.units);
        let v_base = take_rows(design.v_base.values.view(), &set.units);
        let z = take_rows(design.z.values.view(), &set.units);
        let d_dict = prepare_dictionary(d, v_now.view(), standardize)?;
        let b_dict = prepare_dictionary(b, z.view(), standardize)?;
        let delta = d_dict.eval_rows(v_now.view())? - d_dict.eval_rows(v_base.view())?;
        let w = set.demean(delta.view());
        let x = b_dict.eval_rows(z.view())?;
        let m = d_dict.eval_derivative_rows(v_now.view(), &design.target)?;
        let ids = set.units.clone();
        Ok(Self {
            set,
            b_dict,
            d_dict,
            sample: SampleMoments { w, x, m, ids },
        })
    }

    pub fn g_hat(&self) -> Array2<f64> {
        self.sample.w.t().dot(&self.sample.x) / self.sample.n() as f64
    }

    pub fn m_hat(&self) -> Array1<f64> {
        self.sample
            .m
            .mean_axis(Axis(0))
            .expect("non-empty estimation set")
    }
}

/// `Ĝ_k` with the dictionaries used as given (no refitting when fitted,
/// identity transforms otherwise).
pub fn build_g_hat(
    design: &EstimandDesign,
    partition: &FoldPartition,
    k: usize,
    b: &Dictionary,
    d: &Dictionary,
) -> Result<Array2<f64>> {
    Ok(RieszMoments::build(design, partition, k, b, d, false)?.g_hat())
}

/// `M̂_k`; see [`build_g_hat`].
pub fn build_m_hat(
    design: &EstimandDesign,
    partition: &FoldPartition,
    k: usize,
    b: &Dictionary,
    d: &Dictionary,
) -> Result<Array1<f64>> {
    Ok(RieszMoments::build(design, partition, k, b, d, false)?.m_hat())
}

/// Fitted `α̂_k`.
#[derive(Debug, Clone)]
pub struct RieszEstimate {
    pub rho: Array1<f64>,
    /// Fitted `b` dictionary; evaluates raw `Z` rows.
    pub dictionary: Dictionary,
    pub fold_index: usize,
    pub solution: SolveSummary,
    pub cv: Option<CvOutcome>,
}

impl RieszEstimate {
    pub fn eval_rows(&self, z: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.dictionary.eval_rows(z)?.dot(&self.rho))
    }

    /// Same dictionary with all coefficients zero (`α̂ ≡ 0`).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.rho.fill(0.0);
        out
    }
}

/// Fit `α̂_k` on the estimation units of held-out fold `k`.
pub fn estimate_riesz(
    design: &EstimandDesign,
    partition: &FoldPartition,
    k: usize,
    spec: &RieszSpec,
    cv_seed: u64,
    opts: &SolverOptions,
) -> Result<RieszEstimate> {
    let (b, d) = spec.dictionaries(design)?;
    let moments = RieszMoments::build(design, partition, k, &b, &d, spec.standardize)?;
    estimate_riesz_from(&moments, k, spec, cv_seed, opts)
}

/// [`estimate_riesz`] on prebuilt moments.
pub fn estimate_riesz_from(
    moments: &RieszMoments,
    k: usize,
    spec: &RieszSpec,
    cv_seed: u64,
    opts: &SolverOptions,
) -> Result<RieszEstimate> {
    let ctx = format!("riesz representer, held-out fold {k}");
    let omega = spec.omega()?;
    let (sol, cv) = moments
        .sample
        .fit(&omega, &spec.penalty, cv_seed, opts)
        .map_err(|e| e.with_context(&ctx))?;
    let sol = sol.require_converged(&ctx)?;
    Ok(RieszEstimate {
        solution: sol.summary(),
        rho: sol.rho,
        dictionary: moments.b_dict.clone(),
        fold_index: k,
        cv,
    })
}
