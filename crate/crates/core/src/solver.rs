//! L1-penalized GMM: `min_ρ (M − Gρ)'Ω(M − Gρ) + 2r‖ρ‖₁`.
//!
//! Every problem is reduced to the quadratic `ρ'Hρ − 2c'ρ + k` with
//! `H = G'ΩG`, `c = G'ΩM`, `k = M'ΩM`, and solved by cyclic coordinate
//! descent with soft-thresholding. Convergence is declared on the KKT
//! stationarity residual `c − Hρ ∈ r·∂‖ρ‖₁`. After a few sweeps an exact
//! active-set phase takes over, which keeps near-unpenalized fits from
//! stalling on ill-conditioned `H`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinates with `H_jj` below this are frozen at zero.
pub const FROZEN_DIAGONAL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Moment weighting `Ω`.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Identity,
    Matrix(Array2<f64>),
}

/// `(G, M, Ω)` for one penalized GMM problem; `G` is `q × p`.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub g: Array2<f64>,
    pub m: Array1<f64>,
    pub omega: Weighting,
}

impl MomentSystem {
    pub fn new(g: Array2<f64>, m: Array1<f64>) -> Self {
        Self {
            g,
            m,
            omega: Weighting::Identity,
        }
    }

    pub fn with_weighting(mut self, omega: Weighting) -> Self {
        self.omega = omega;
        self
    }

    pub fn n_moments(&self) -> usize {
        self.g.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.g.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (q, _) = self.g.dim();
        if self.m.len() != q {
            return Err(Error::Shape {
                expected: q,
                actual: self.m.len(),
            });
        }
        if !self.g.iter().chain(self.m.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "moment system has non-finite entries".into(),
            ));
        }
        if let Weighting::Matrix(w) = &self.omega {
            if w.dim() != (q, q) {
                return Err(Error::Shape {
                    expected: q,
                    actual: w.nrows(),
                });
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(
                    "weighting matrix has non-finite entries".into(),
                ));
            }
            for i in 0..q {
                for j in 0..i {
                    if (w[[i, j]] - w[[j, i]]).abs() > SYMMETRY_TOL {
                        return Err(Error::Numeric("weighting matrix is not symmetric".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn weighted(&self, v: ArrayView2<'_, f64>) -> Array2<f64> {
        match &self.omega {
            Weighting::Identity => v.to_owned(),
            Weighting::Matrix(w) => w.dot(&v),
        }
    }

    /// Unpenalized criterion `(M − Gρ)'Ω(M − Gρ)`.
    pub fn criterion(&self, rho: ArrayView1<'_, f64>) -> f64 {
        let resid = &self.m - &self.g.dot(&rho);
        match &self.omega {
            Weighting::Identity => resid.dot(&resid),
            Weighting::Matrix(w) => resid.dot(&w.dot(&resid)),
        }
    }
}

/// `ρ'Hρ − 2c'ρ + constant`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub h: Array2<f64>,
    pub c: Array1<f64>,
    pub constant: f64,
}

impl Quadratic {
    pub fn value(&self, rho: ArrayView1<'_, f64>) -> f64 {
        rho.dot(&self.h.dot(&rho)) - 2.0 * self.c.dot(&rho) + self.constant
    }

    /// Largest penalty with a non-zero solution, `‖c‖_∞`.
    pub fn max_penalty(&self) -> f64 {
        self.c.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }
}

/// Anything reducible to a [`Quadratic`]; used by cross-validation so GMM and
/// least-squares problems share one code path.
pub trait QuadraticForm {
    fn quadratic(&self) -> Quadratic;
}

impl QuadraticForm for MomentSystem {
    fn quadratic(&self) -> Quadratic {
        let m2 = self.m.view().insert_axis(Axis(1));
        let wg = self.weighted(self.g.view());
        let wm = self.weighted(m2);
        let h = self.g.t().dot(&wg);
        let c = self.g.t().dot(&wm).column(0).to_owned();
        let constant = self.m.dot(&wm.column(0));
        Quadratic { h, c, constant }
    }
}

/// `‖y − Xβ‖²/n`, written as a quadratic in `β`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl QuadraticForm for LeastSquares {
    fn quadratic(&self) -> Quadratic {
        let n = self.x.nrows() as f64;
        Quadratic {
            h: self.x.t().dot(&self.x) / n,
            c: self.x.t().dot(&self.y) / n,
            constant: self.y.dot(&self.y) / n,
        }
    }
}

impl QuadraticForm for Quadratic {
    fn quadratic(&self) -> Quadratic {
        self.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Maximum KKT stationarity violation accepted as converged.
    pub tol: f64,
    /// Maximum number of full coordinate sweeps.
    pub max_iter: usize,
    /// Keep the objective after every sweep in `objective_trace`.
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20_000,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedSolution {
    pub rho: Array1<f64>,
    pub penalty: f64,
    pub objective_value: f64,
    pub kkt_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
}

/// Solution metadata without the coefficient vector, for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub penalty: f64,
    pub objective_value: f64,
    pub kkt_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    pub nonzero: usize,
}

impl PenalizedSolution {
    pub fn summary(&self) -> SolveSummary {
        SolveSummary {
            penalty: self.penalty,
            objective_value: self.objective_value,
            kkt_violation: self.kkt_violation,
            iterations: self.iterations,
            converged: self.converged,
            nonzero: self.rho.iter().filter(|v| **v != 0.0).count(),
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.rho.iter().map(|v| v.abs()).sum()
    }

    /// Error out unless converged.
    pub fn require_converged(self, context: &str) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                context: context.to_string(),
                kkt_violation: self.kkt_violation,
                iterations: self.iterations,
            })
        }
    }
}

#[inline]
fn soft_threshold(z: f64, r: f64) -> f64 {
    if z > r {
        z - r
    } else if z < -r {
        z + r
    } else {
        0.0
    }
}

/// Max stationarity residual given `grad = c − Hρ`.
pub fn kkt_violation(grad: ArrayView1<'_, f64>, rho: ArrayView1<'_, f64>, r: f64) -> f64 {
    grad.iter()
        .zip(rho.iter())
        .map(|(&g, &x)| {
            if x == 0.0 {
                (g.abs() - r).max(0.0)
            } else {
                (g - r * x.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn penalized_value(q: &Quadratic, rho: ArrayView1<'_, f64>, r: f64) -> f64 {
    q.value(rho) + 2.0 * r * rho.iter().map(|v| v.abs()).sum::<f64>()
}

/// In-place Cholesky of a symmetric positive definite matrix (lower factor).
/// On failure returns the first pivot that is numerically zero; the leading
/// block before it stays factored.
fn cholesky(a: &mut Array2<f64>) -> std::result::Result<(), usize> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max);
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if d.is_nan() || d <= scale * 1e-13 {
            return Err(j);
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / d;
        }
    }
    Ok(())
}

fn cholesky_solve(l: &Array2<f64>, b: &mut [f64]) {
    let n = b.len();
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[[i, k]] * b[k];
        }
        b[i] = v / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= l[[k, i]] * b[k];
        }
        b[i] = v / l[[i, i]];
    }
}

enum Reduced {
    /// Minimizer of `ρ'Hρ − 2c'ρ + 2rσ'ρ` over the active coordinates.
    Target(Vec<f64>),
    /// Direction in the null space of `H_AA`, indexed like the active set.
    Null(Vec<f64>),
}

/// Solve the reduced problem on `active` (others fixed at zero) with one step
/// of iterative refinement, or return a null direction when `H_AA` is
/// singular.
fn newton_target(q: &Quadratic, active: &[usize], sign: &[f64], r: f64) -> Option<Reduced> {
    let na = active.len();
    let sub = Array2::from_shape_fn((na, na), |(a, b)| q.h[[active[a], active[b]]]);
    let mut l = sub.clone();
    if let Err(f) = cholesky(&mut l) {
        // column f is a combination of the factored columns before it
        let lead = l.slice(ndarray::s![..f, ..f]).to_owned();
        let mut v: Vec<f64> = (0..f).map(|a| -sub[[a, f]]).collect();
        cholesky_solve(&lead, &mut v);
        v.push(1.0);
        v.resize(na, 0.0);
        return v.iter().all(|x| x.is_finite()).then_some(Reduced::Null(v));
    }
    let rhs: Vec<f64> = active
        .iter()
        .zip(sign)
        .map(|(&j, s)| q.c[j] - r * s)
        .collect();
    let mut x = rhs.clone();
    cholesky_solve(&l, &mut x);
    let mut resid: Vec<f64> = (0..na)
        .map(|a| rhs[a] - (0..na).map(|b| sub[[a, b]] * x[b]).sum::<f64>())
        .collect();
    cholesky_solve(&l, &mut resid);
    for a in 0..na {
        x[a] += resid[a];
    }
    x.iter()
        .all(|v| v.is_finite())
        .then_some(Reduced::Target(x))
}

/// Move along a null direction of `H_AA` that does not increase the
/// objective until the first active coordinate reaches zero. Returns `false`
/// if nothing blocks, which a bounded problem rules out up to rounding.
fn null_step(
    active: &[usize],
    sign: &[f64],
    grad: &Array1<f64>,
    r: f64,
    rho: &mut Array1<f64>,
    mut v: Vec<f64>,
) -> bool {
    // objective slope along v is 2(rσ − grad)'v on the active set
    let slope: f64 = active
        .iter()
        .zip(sign)
        .zip(&v)
        .map(|((&j, s), x)| (r * s - grad[j]) * x)
        .sum();
    if slope > 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let mut t = f64::INFINITY;
    for (a, &j) in active.iter().enumerate() {
        if v[a] * sign[a] < 0.0 {
            t = t.min(rho[j].abs() / v[a].abs());
        }
    }
    if !t.is_finite() {
        return false;
    }
    for (a, &j) in active.iter().enumerate() {
        if v[a] * sign[a] < 0.0 && rho[j].abs() / v[a].abs() <= t {
            rho[j] = 0.0;
        } else {
            rho[j] += t * v[a];
        }
    }
    true
}

/// Primal active-set iterations from the current point. Each step moves
/// towards the Newton target of the current signed support, stopping where a
/// coordinate would change sign, or adds the worst KKT violator once the
/// support is optimal. Returns `true` on a KKT certificate, `false` if a
/// reduced system is singular or the step budget runs out.
#[allow(clippy::too_many_arguments)]
fn active_set(
    q: &Quadratic,
    r: f64,
    frozen: &[bool],
    rho: &mut Array1<f64>,
    grad: &mut Array1<f64>,
    tol: f64,
    steps: &mut usize,
    max_steps: usize,
) -> bool {
    let p = rho.len();
    let mut active: Vec<usize> = (0..p).filter(|&j| rho[j] != 0.0).collect();
    let mut sign: Vec<f64> = active.iter().map(|&j| rho[j].signum()).collect();
    while *steps < max_steps {
        *steps += 1;
        if !active.is_empty() {
            let x = match newton_target(q, &active, &sign, r) {
                Some(Reduced::Target(x)) => x,
                Some(Reduced::Null(v)) => {
                    if !null_step(&active, &sign, grad, r, rho, v) {
                        return false;
                    }
                    let kept: Vec<usize> = (0..active.len())
                        .filter(|&a| rho[active[a]] != 0.0)
                        .collect();
                    sign = kept.iter().map(|&a| sign[a]).collect();
                    active = kept.iter().map(|&a| active[a]).collect();
                    *grad = &q.c - &q.h.dot(&*rho);
                    continue;
                }
                None => return false,
            };
            // largest step keeping every coordinate in its orthant
            let mut t = 1.0_f64;
            for (a, &j) in active.iter().enumerate() {
                if x[a] * sign[a] <= 0.0 {
                    let denom = rho[j] - x[a];
                    let ta = if denom == 0.0 { 0.0 } else { rho[j] / denom };
                    t = t.min(ta.max(0.0));
                }
            }
            let mut keep_active = Vec::with_capacity(active.len());
            let mut keep_sign = Vec::with_capacity(active.len());
            for (a, &j) in active.iter().enumerate() {
                let blocking = x[a] * sign[a] <= 0.0 && {
                    let denom = rho[j] - x[a];
                    denom == 0.0 || rho[j] / denom <= t
                };
                if t >= 1.0 && !blocking {
                    rho[j] = x[a];
                } else if blocking {
                    rho[j] = 0.0;
                } else {
                    rho[j] += t * (x[a] - rho[j]);
                }
                if rho[j] != 0.0 {
                    keep_active.push(j);
                    keep_sign.push(sign[a]);
                }
            }
            active = keep_active;
            sign = keep_sign;
            *grad = &q.c - &q.h.dot(&*rho);
            if t < 1.0 {
                continue;
            }
        }
        if kkt_violation(grad.view(), rho.view(), r) <= tol {
            return true;
        }
        let worst = (0..p)
            .filter(|&j| rho[j] == 0.0 && !frozen[j])
            .map(|j| (j, grad[j].abs() - r))
            .filter(|(_, v)| *v > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((j, _)) => {
                active.push(j);
                sign.push(grad[j].signum());
            }
            // violation sits on the active set: rounding, let CD finish
            None => return false,
        }
    }
    false
}

/// Sweeps of coordinate descent before the active-set phase.
const WARM_SWEEPS: usize = 10;

/// Minimize `ρ'Hρ − 2c'ρ + 2r‖ρ‖₁`.
///
/// A few coordinate-descent sweeps find an approximate support, then
/// active-set steps solve the problem exactly. If a reduced system is
/// numerically singular the solver falls back to plain coordinate descent
/// until the KKT certificate holds or `max_iter` sweeps are spent.
pub fn solve_quadratic(
    q: &Quadratic,
    r: f64,
    init: Option<ArrayView1<'_, f64>>,
    opts: &SolverOptions,
) -> Result<PenalizedSolution> {
    let p = q.c.len();
    if q.h.dim() != (p, p) {
        return Err(Error::Shape {
            expected: p,
            actual: q.h.nrows(),
        });
    }
    if !r.is_finite() || r < 0.0 {
        return Err(Error::Numeric(format!(
            "penalty must be finite and non-negative, got {r}"
        )));
    }
    if !q.h.iter().chain(q.c.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("quadratic has non-finite entries".into()));
    }
    let frozen: Vec<bool> = (0..p).map(|j| q.h[[j, j]] < FROZEN_DIAGONAL).collect();
    let mut rho = match init {
        Some(v) if v.len() == p => v.to_owned(),
        Some(v) => {
            return Err(Error::Shape {
                expected: p,
                actual: v.len(),
            })
        }
        None => Array1::zeros(p),
    };
    for j in 0..p {
        if frozen[j] {
            rho[j] = 0.0;
        }
    }
    let mut grad = &q.c - &q.h.dot(&rho);
    let mut trace = Vec::new();
    let mut kkt = kkt_violation(grad.view(), rho.view(), r);
    let mut iterations = 0;
    let mut converged = kkt <= opts.tol;
    let mut tried_active_set = false;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        for j in 0..p {
            if frozen[j] {
                continue;
            }
            let hjj = q.h[[j, j]];
            let old = rho[j];
            let new = soft_threshold(grad[j] + hjj * old, r) / hjj;
            let delta = new - old;
            if delta != 0.0 {
                rho[j] = new;
                grad.scaled_add(-delta, &q.h.column(j));
            }
        }
        kkt = kkt_violation(grad.view(), rho.view(), r);
        if opts.record_trace {
            trace.push(penalized_value(q, rho.view(), r));
        }
        if kkt <= opts.tol {
            converged = true;
            break;
        }
        if !tried_active_set && iterations >= WARM_SWEEPS {
            tried_active_set = true;
            let (rho0, grad0) = (rho.clone(), grad.clone());
            let before = penalized_value(q, rho.view(), r);
            let mut steps = 0;
            let ok = active_set(
                q,
                r,
                &frozen,
                &mut rho,
                &mut grad,
                opts.tol,
                &mut steps,
                4 * p + 20,
            );
            let after = penalized_value(q, rho.view(), r);
            if !ok
                && matches!(
                    after.partial_cmp(&before),
                    None | Some(std::cmp::Ordering::Greater)
                )
            {
                rho = rho0;
                grad = grad0;
            }
            kkt = kkt_violation(grad.view(), rho.view(), r);
            if opts.record_trace {
                trace.push(penalized_value(q, rho.view(), r));
            }
            converged = kkt <= opts.tol;
        }
    }
    let objective_value = penalized_value(q, rho.view(), r);
    Ok(PenalizedSolution {
        rho,
        penalty: r,
        objective_value,
        kkt_violation: kkt,
        iterations,
        converged,
        objective_trace: trace,
    })
}

/// Minimize `(M − Gρ)'Ω(M − Gρ) + 2r‖ρ‖₁`.
///
/// Hitting `max_iter` is not an error: the solution comes back with
/// `converged = false` and its diagnostics.
pub fn solve_penalized_gmm(
    system: &MomentSystem,
    r: f64,
    init: Option<ArrayView1<'_, f64>>,
    opts: &SolverOptions,
) -> Result<PenalizedSolution> {
    system.validate()?;
    solve_quadratic(&system.quadratic(), r, init, opts)
}

fn check_grid(penalties: &[f64]) -> Result<()> {
    if penalties.is_empty() {
        return Err(Error::config("penalty grid is empty"));
    }
    if penalties.iter().any(|r| r.is_nan() || *r < 0.0) {
        return Err(Error::config("penalties must be non-negative"));
    }
    if penalties.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("penalty grid must be strictly descending"));
    }
    Ok(())
}

/// Warm-started solutions along a strictly descending penalty grid.
pub fn solve_quadratic_path(
    q: &Quadratic,
    penalties: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<PenalizedSolution>> {
    check_grid(penalties)?;
    let mut out: Vec<PenalizedSolution> = Vec::with_capacity(penalties.len());
    for &r in penalties {
        let init = out.last().map(|s| s.rho.view());
        let sol = solve_quadratic(q, r, init, opts)?;
        out.push(sol);
    }
    Ok(out)
}

pub fn solve_path(
    system: &MomentSystem,
    penalties: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<PenalizedSolution>> {
    system.validate()?;
    solve_quadratic_path(&system.quadratic(), penalties, opts)
}

/// `n` log-spaced penalties from `r_max` down to `ratio · r_max`.
pub fn penalty_grid(r_max: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n == 0 || r_max.is_nan() || r_max <= 0.0 {
        return vec![0.0];
    }
    if n == 1 {
        return vec![r_max];
    }
    let (hi, lo) = (r_max.ln(), (r_max * ratio).ln());
    (0..n)
        .map(|i| (hi + (lo - hi) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub selected: f64,
    pub grid: Vec<f64>,
    /// Mean validation criterion per grid point.
    pub scores: Vec<f64>,
}

/// Split `0..n_units` into `cv_folds` shuffled, near-equal groups.
pub fn inner_folds(n_units: usize, cv_folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let ids: Vec<usize> = (0..n_units).collect();
    inner_folds_by_id(&ids, cv_folds, seed)
}

/// Like [`inner_folds`], but assignment follows the sorted `ids` rather than
/// row positions, so reordering the rows does not change which units share a
/// fold. Returned folds hold row positions.
pub fn inner_folds_by_id(ids: &[usize], cv_folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n_units = ids.len();
    if cv_folds < 2 {
        return Err(Error::config("cross-validation needs at least two folds"));
    }
    if n_units < cv_folds {
        return Err(Error::config(format!(
            "{n_units} units cannot fill {cv_folds} cross-validation folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_units).collect();
    order.sort_by_key(|&i| ids[i]);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n_units / cv_folds;
    let extra = n_units % cv_folds;
    let mut folds = Vec::with_capacity(cv_folds);
    let mut start = 0;
    for f in 0..cv_folds {
        let size = base + usize::from(f < extra);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

/// Choose the penalty minimizing the mean unpenalized validation criterion.
///
/// `folds` partitions the sample; `builder(train, val)` returns the training
/// and validation problems for one split. The path is fitted on the training
/// problem and scored on the validation one. Ties go to the larger penalty.
pub fn cross_validate_penalty<P, F>(
    folds: &[Vec<usize>],
    n_units: usize,
    builder: F,
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<CvOutcome>
where
    P: QuadraticForm,
    F: Fn(&[usize], &[usize]) -> Result<(P, P)> + Sync,
{
    if grid.is_empty() {
        return Err(Error::config("penalty grid is empty"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    if grid.len() == 1 {
        return Ok(CvOutcome {
            selected: grid[0],
            scores: vec![0.0],
            grid,
        });
    }
    if folds.len() < 2 {
        return Err(Error::config("cross-validation needs at least two folds"));
    }
    let per_fold: Vec<Vec<f64>> = folds
        .par_iter()
        .map(|val| -> Result<Vec<f64>> {
            let mut in_val = vec![false; n_units];
            for &i in val {
                in_val[i] = true;
            }
            let train: Vec<usize> = (0..n_units).filter(|&i| !in_val[i]).collect();
            let (train_p, val_p) = builder(&train, val)?;
            let (train_q, val_q) = (train_p.quadratic(), val_p.quadratic());
            let path = solve_quadratic_path(&train_q, &grid, opts)?;
            Ok(path.iter().map(|s| val_q.value(s.rho.view())).collect())
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|f| f[g]).sum::<f64>() / per_fold.len() as f64)
        .collect();
    let mut best = 0;
    for g in 1..grid.len() {
        if scores[g] < scores[best] {
            best = g;
        }
    }
    Ok(CvOutcome {
        selected: grid[best],
        grid,
        scores,
    })
}

/// Lasso `‖y − Xβ‖²/n + 2r‖β‖₁` through the same coordinate-descent core.
pub fn solve_lasso(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    r: f64,
    opts: &SolverOptions,
) -> Result<PenalizedSolution> {
    if x.nrows() != y.len() {
        return Err(Error::Shape {
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::config("lasso needs at least one observation"));
    }
    if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("lasso design has non-finite entries".into()));
    }
    let q = LeastSquares {
        x: x.to_owned(),
        y: y.to_owned(),
    }
    .quadratic();
    solve_quadratic(&q, r, None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_target_gives_zero() {
        let sys = MomentSystem::new(
            array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]],
            Array1::zeros(3),
        );
        for r in [0.0, 0.3, 5.0] {
            let s = solve_penalized_gmm(&sys, r, None, &SolverOptions::default()).unwrap();
            assert!(s.converged);
            assert!(s.rho.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn full_shrinkage_threshold() {
        let sys = MomentSystem::new(
            array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]],
            array![1.0, -2.0, 0.5],
        );
        let r_max = sys.quadratic().max_penalty();
        let s = solve_penalized_gmm(&sys, r_max, None, &SolverOptions::default()).unwrap();
        assert!(s.rho.iter().all(|v| *v == 0.0));
        let s = solve_penalized_gmm(&sys, 0.9 * r_max, None, &SolverOptions::default()).unwrap();
        assert!(s.rho.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn orthonormal_lasso_is_soft_threshold() {
        // columns orthogonal with X'X/n = I
        let x = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let y = array![3.0, 1.0, -0.5, 0.25];
        let xty: Array1<f64> = x.t().dot(&y) / 4.0;
        let r = 0.4;
        let s = solve_lasso(x.view(), y.view(), r, &SolverOptions::default()).unwrap();
        for j in 0..2 {
            assert!((s.rho[j] - soft_threshold(xty[j], r)).abs() < 1e-12);
        }
        let zero = solve_lasso(
            x.view(),
            Array1::zeros(4).view(),
            r,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(zero.rho.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_coordinates_stay_zero() {
        let sys = MomentSystem::new(array![[1.0, 0.0], [2.0, 0.0]], array![1.0, 1.0]);
        let s = solve_penalized_gmm(&sys, 0.0, None, &SolverOptions::default()).unwrap();
        assert_eq!(s.rho[1], 0.0);
        assert!((s.rho[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn grid_shape_and_errors() {
        let g = penalty_grid(2.0, 50, 1e-4);
        assert_eq!(g.len(), 50);
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[49] - 2e-4).abs() < 1e-12);
        let sys = MomentSystem::new(array![[1.0]], array![1.0]);
        assert!(solve_path(&sys, &[0.1, 0.2], &SolverOptions::default()).is_err());
        assert!(matches!(
            solve_penalized_gmm(
                &MomentSystem::new(array![[f64::NAN]], array![1.0]),
                0.0,
                None,
                &SolverOptions::default()
            ),
            Err(Error::Numeric(_))
        ));
        let asym = MomentSystem::new(array![[1.0], [1.0]], array![1.0, 1.0])
            .with_weighting(Weighting::Matrix(array![[1.0, 0.5], [0.0, 1.0]]));
        assert!(matches!(asym.validate(), Err(Error::Numeric(_))));
    }

    #[test]
    fn non_convergence_is_reported() {
        let sys = MomentSystem::new(
            array![[1.0, 0.999], [0.999, 1.0], [1.0, 1.0]],
            array![1.0, -1.0, 0.3],
        );
        let opts = SolverOptions {
            max_iter: 1,
            ..Default::default()
        };
        let s = solve_penalized_gmm(&sys, 0.0, None, &opts).unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations, 1);
        assert!(s.clone().require_converged("t").is_err());
    }

    #[test]
    fn cv_single_point_and_tie_break() {
        let sys = || MomentSystem::new(Array2::zeros((3, 2)), array![0.3, -0.2, 0.9]);
        let build = |_: &[usize], _: &[usize]| Ok((sys(), sys()));
        let folds = inner_folds(20, 5, 1).unwrap();
        let one =
            cross_validate_penalty(&folds, 20, build, &[0.7], &SolverOptions::default()).unwrap();
        assert_eq!(one.selected, 0.7);
        let grid = penalty_grid(1.0, 10, 1e-3);
        let tie =
            cross_validate_penalty(&folds, 20, build, &grid, &SolverOptions::default()).unwrap();
        assert_eq!(tie.selected, 1.0);
        assert!(inner_folds(3, 5, 1).is_err());
    }
}
