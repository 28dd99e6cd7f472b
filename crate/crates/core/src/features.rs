//! Regressor (`V`) and instrument (`Z`) assembly plus polynomial dictionaries
//! with exact derivatives.
//!
//! Raw vectors carry a [`Layout`]: one [`VariableSpec`] per position, where
//! `lag` counts periods back from the base period `t`. Dictionary terms refer
//! to variables by spec, so the same dictionary evaluates `V_{it}` and
//! `V_{i,t-s-1}` (both assembled relative to their own base period).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};

/// Below this population standard deviation a term is treated as constant.
pub const DEGENERATE_SD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Outcome,
    Treatment,
    Covariate,
    Instrument,
    Invariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    #[default]
    Static,
    Dynamic,
}

/// One scalar variable: `role` at period `t - lag`, column `component`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableSpec {
    pub role: Role,
    pub lag: i64,
    pub component: usize,
}

impl VariableSpec {
    pub fn new(role: Role, lag: i64, component: usize) -> Self {
        Self {
            role,
            lag,
            component,
        }
    }

    pub fn treatment(lag: i64) -> Self {
        Self::new(Role::Treatment, lag, 0)
    }
}

impl std::fmt::Display for VariableSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.role {
            Role::Outcome => "Y",
            Role::Treatment => "D",
            Role::Covariate => "X",
            Role::Instrument => "I",
            Role::Invariant => "C",
        };
        match self.role {
            Role::Invariant => write!(f, "{name}{}", self.component + 1),
            Role::Outcome | Role::Treatment => write!(f, "{name}[t-{}]", self.lag),
            _ => write!(f, "{name}{}[t-{}]", self.component + 1, self.lag),
        }
    }
}

pub type Layout = Vec<VariableSpec>;

/// Lag orders of the structural function: `q` for treatments and covariates,
/// `p` for the autoregressive block (dynamic model only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LagOrders {
    pub q: usize,
    #[serde(default)]
    pub p: usize,
}

/// Raw per-unit vectors (`N × len`) with their layout.
#[derive(Debug, Clone)]
pub struct RawBlock {
    pub layout: Layout,
    pub values: Array2<f64>,
}

fn require_period(period: i64, what: impl FnOnce() -> String) -> Result<()> {
    if period < 1 {
        Err(Error::Lag {
            what: what(),
            required: period,
        })
    } else {
        Ok(())
    }
}

/// Assemble `V_{it}`: static `(X̄_{t−q:t}, D̄_{t−q:t}, C)`, dynamic
/// `(Ȳ_{t−1−p:t−1}, X̄_{t−q:t}, D̄_{t−q:t}, C)`. Each time-varying block runs
/// oldest period first, covariate components innermost.
pub fn assemble_v(
    panel: &PanelDataset,
    t: usize,
    lags: LagOrders,
    model: Model,
) -> Result<RawBlock> {
    let t_i = t as i64;
    if t == 0 || t > panel.n_periods() {
        return Err(Error::domain(format!(
            "period {t} outside 1..={}",
            panel.n_periods()
        )));
    }
    require_period(t_i - lags.q as i64, || {
        format!("V at t={t} with q={}", lags.q)
    })?;
    let mut layout = Vec::new();
    if model == Model::Dynamic {
        require_period(t_i - 1 - lags.p as i64, || {
            format!("lagged outcomes in V at t={t} with p={}", lags.p)
        })?;
        for lag in (1..=lags.p as i64 + 1).rev() {
            layout.push(VariableSpec::new(Role::Outcome, lag, 0));
        }
    }
    for lag in (0..=lags.q as i64).rev() {
        for l in 0..panel.n_covariates() {
            layout.push(VariableSpec::new(Role::Covariate, lag, l));
        }
    }
    for lag in (0..=lags.q as i64).rev() {
        layout.push(VariableSpec::treatment(lag));
    }
    for c in 0..panel.n_invariant() {
        layout.push(VariableSpec::new(Role::Invariant, 0, c));
    }
    let values = gather(panel, t, &layout);
    Ok(RawBlock { layout, values })
}

/// Assemble `Z_{it}`: the full history up to `t−s−1` (truncated at period 1)
/// of the exogenous covariates selected by `exogenous_mask`, treatments and
/// instruments, then `C`. The dynamic model prepends outcomes up to `t−s−2`.
pub fn assemble_z(
    panel: &PanelDataset,
    t: usize,
    s: usize,
    model: Model,
    exogenous_mask: &[usize],
) -> Result<RawBlock> {
    if t == 0 || t > panel.n_periods() {
        return Err(Error::domain(format!(
            "period {t} outside 1..={}",
            panel.n_periods()
        )));
    }
    if let Some(&bad) = exogenous_mask.iter().find(|&&l| l >= panel.n_covariates()) {
        return Err(Error::config(format!("covariate index {bad} out of range")));
    }
    let t_i = t as i64;
    let last = t_i - s as i64 - 1;
    require_period(last, || format!("Z at t={t}, s={s}"))?;
    let mut layout = Vec::new();
    if model == Model::Dynamic {
        require_period(last - 1, || format!("lagged outcomes in Z at t={t}, s={s}"))?;
        for period in 1..last {
            layout.push(VariableSpec::new(Role::Outcome, t_i - period, 0));
        }
    }
    for period in 1..=last {
        for &l in exogenous_mask {
            layout.push(VariableSpec::new(Role::Covariate, t_i - period, l));
        }
    }
    for period in 1..=last {
        layout.push(VariableSpec::treatment(t_i - period));
    }
    for period in 1..=last {
        for m in 0..panel.n_instruments() {
            layout.push(VariableSpec::new(Role::Instrument, t_i - period, m));
        }
    }
    for c in 0..panel.n_invariant() {
        layout.push(VariableSpec::new(Role::Invariant, 0, c));
    }
    let values = gather(panel, t, &layout);
    Ok(RawBlock { layout, values })
}

fn gather(panel: &PanelDataset, t: usize, layout: &[VariableSpec]) -> Array2<f64> {
    let n = panel.n_units();
    Array2::from_shape_fn((n, layout.len()), |(i, j)| {
        let v = layout[j];
        let col = (t as i64 - v.lag - 1) as usize;
        match v.role {
            Role::Outcome => panel.outcome[[i, col]],
            Role::Treatment => panel.treatment[[i, col]],
            Role::Covariate => panel.covariates[[i, col, v.component]],
            Role::Instrument => panel.instruments[[i, col, v.component]],
            Role::Invariant => panel.invariant_covariates[[i, v.component]],
        }
    })
}

/// Selects variables by role and lag; `component: None` means every column
/// of that role present in the layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarSelector {
    pub role: Role,
    #[serde(default)]
    pub lag: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
}

impl VarSelector {
    pub fn new(role: Role, lag: i64) -> Self {
        Self {
            role,
            lag,
            component: None,
        }
    }

    pub fn component(mut self, c: usize) -> Self {
        self.component = Some(c);
        self
    }

    /// Same selector with its lag moved `by` periods further back.
    pub fn shifted(&self, by: i64) -> Self {
        let lag = if self.role == Role::Invariant {
            self.lag
        } else {
            self.lag + by
        };
        Self {
            lag,
            ..self.clone()
        }
    }

    fn resolve(&self, layout: &[VariableSpec]) -> Result<Vec<VariableSpec>> {
        let hits: Vec<VariableSpec> = layout
            .iter()
            .copied()
            .filter(|v| {
                v.role == self.role
                    && (self.role == Role::Invariant || v.lag == self.lag)
                    && self.component.is_none_or(|c| c == v.component)
            })
            .collect();
        if hits.is_empty() {
            return Err(Error::domain(format!(
                "no variable matches {:?} at lag {} (component {:?})",
                self.role, self.lag, self.component
            )));
        }
        Ok(hits)
    }
}

/// Shorthand blocks expanded by [`build_dictionary`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermGenerator {
    Intercept,
    /// `v^j` for each selected `v` and `j = min_degree..=max_degree`.
    Powers {
        vars: Vec<VarSelector>,
        #[serde(default = "one")]
        min_degree: u32,
        max_degree: u32,
    },
    /// `a^j · b^k` for `a` in `left`, `b` in `right`, `j ≤ left_degree`,
    /// `k ≤ right_degree`.
    Interactions {
        left: Vec<VarSelector>,
        right: Vec<VarSelector>,
        left_degree: u32,
        right_degree: u32,
    },
    /// Every monomial in `vars` of total degree `1..=max_degree`.
    FullPoly {
        vars: Vec<VarSelector>,
        max_degree: u32,
    },
}

fn one() -> u32 {
    1
}

impl TermGenerator {
    /// Copy with every selector lag moved `by` periods back.
    pub fn shifted(&self, by: i64) -> Self {
        let sh = |v: &[VarSelector]| v.iter().map(|s| s.shifted(by)).collect::<Vec<_>>();
        match self {
            TermGenerator::Intercept => TermGenerator::Intercept,
            TermGenerator::Powers {
                vars,
                min_degree,
                max_degree,
            } => TermGenerator::Powers {
                vars: sh(vars),
                min_degree: *min_degree,
                max_degree: *max_degree,
            },
            TermGenerator::Interactions {
                left,
                right,
                left_degree,
                right_degree,
            } => TermGenerator::Interactions {
                left: sh(left),
                right: sh(right),
                left_degree: *left_degree,
                right_degree: *right_degree,
            },
            TermGenerator::FullPoly { vars, max_degree } => TermGenerator::FullPoly {
                vars: sh(vars),
                max_degree: *max_degree,
            },
        }
    }
}

/// A monomial `∏ v^power`; no factors means the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisTerm {
    pub factors: Vec<(VariableSpec, u32)>,
}

impl BasisTerm {
    pub fn intercept() -> Self {
        Self { factors: vec![] }
    }

    pub fn monomial(factors: Vec<(VariableSpec, u32)>) -> Self {
        Self { factors }
    }

    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.factors.iter().map(|(_, p)| p).sum()
    }

    pub fn contains(&self, v: &VariableSpec) -> bool {
        self.factors.iter().any(|(f, _)| f == v)
    }
}

impl std::fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_intercept() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .factors
            .iter()
            .map(|(v, p)| {
                if *p == 1 {
                    v.to_string()
                } else {
                    format!("{v}^{p}")
                }
            })
            .collect();
        write!(f, "{}", parts.join("*"))
    }
}

/// Per-term affine standardization `(raw − mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermScale {
    pub mean: f64,
    pub scale: f64,
    pub degenerate: bool,
}

impl TermScale {
    pub const IDENTITY: TermScale = TermScale {
        mean: 0.0,
        scale: 1.0,
        degenerate: false,
    };
}

/// Ordered polynomial basis bound to a [`Layout`].
#[derive(Debug, Clone)]
pub struct Dictionary {
    terms: Vec<BasisTerm>,
    layout: Layout,
    // factors as (position in layout, power)
    bound: Vec<Vec<(usize, u32)>>,
    standardization: Vec<TermScale>,
    fitted: bool,
}

impl Dictionary {
    /// Bind explicit terms to `layout`. Duplicates are dropped (first kept).
    pub fn from_terms(terms: Vec<BasisTerm>, layout: &[VariableSpec]) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut kept = Vec::new();
        let mut bound = Vec::new();
        for term in terms {
            let mut b: Vec<(usize, u32)> = Vec::with_capacity(term.factors.len());
            for (v, p) in &term.factors {
                if *p == 0 {
                    return Err(Error::config(format!("zero power on {v}")));
                }
                let idx = layout
                    .iter()
                    .position(|x| x == v)
                    .ok_or_else(|| Error::domain(format!("{v} is not part of the raw layout")))?;
                match b.iter_mut().find(|(i, _)| *i == idx) {
                    Some(slot) => slot.1 += p,
                    None => b.push((idx, *p)),
                }
            }
            b.sort_unstable();
            if seen.insert(b.clone()) {
                let canonical =
                    BasisTerm::monomial(b.iter().map(|&(i, p)| (layout[i], p)).collect());
                kept.push(canonical);
                bound.push(b);
            }
        }
        if kept.is_empty() {
            return Err(Error::config("dictionary has no terms"));
        }
        let n = kept.len();
        Ok(Self {
            terms: kept,
            layout: layout.to_vec(),
            bound,
            standardization: vec![TermScale::IDENTITY; n],
            fitted: false,
        })
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn layout(&self) -> &[VariableSpec] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn standardization(&self) -> &[TermScale] {
        &self.standardization
    }

    /// Install explicit transforms (marks the dictionary fitted).
    pub fn with_standardization(mut self, scales: Vec<TermScale>) -> Result<Self> {
        if scales.len() != self.len() {
            return Err(Error::Shape {
                expected: self.len(),
                actual: scales.len(),
            });
        }
        self.standardization = scales;
        self.fitted = true;
        Ok(self)
    }

    /// Indices of terms whose fitting sample had (numerically) zero spread.
    pub fn degenerate_terms(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| self.standardization[j].degenerate)
            .collect()
    }

    fn check_len(&self, raw: usize) -> Result<()> {
        if raw != self.layout.len() {
            return Err(Error::Shape {
                expected: self.layout.len(),
                actual: raw,
            });
        }
        Ok(())
    }

    #[inline]
    fn raw_term(&self, j: usize, raw: ArrayView1<'_, f64>) -> f64 {
        self.bound[j]
            .iter()
            .map(|&(i, p)| raw[i].powi(p as i32))
            .product()
    }

    #[inline]
    fn raw_term_derivative(&self, j: usize, raw: ArrayView1<'_, f64>, target: usize) -> f64 {
        let factors = &self.bound[j];
        let Some(&(_, pow)) = factors.iter().find(|(i, _)| *i == target) else {
            return 0.0;
        };
        let mut out = pow as f64 * raw[target].powi(pow as i32 - 1);
        for &(i, p) in factors {
            if i != target {
                out *= raw[i].powi(p as i32);
            }
        }
        out
    }

    /// Standardized term values for one raw vector.
    pub fn eval(&self, raw: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_len(raw.len())?;
        Ok((0..self.len())
            .map(|j| {
                let s = self.standardization[j];
                (self.raw_term(j, raw) - s.mean) / s.scale
            })
            .collect())
    }

    /// Row-wise [`Dictionary::eval`] over an `n × len(layout)` matrix.
    pub fn eval_rows(&self, raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_len(raw.ncols())?;
        let mut out = Array2::zeros((raw.nrows(), self.len()));
        for (row, mut dst) in raw.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            for j in 0..self.len() {
                let s = self.standardization[j];
                dst[j] = (self.raw_term(j, row) - s.mean) / s.scale;
            }
        }
        Ok(out)
    }

    fn target_index(&self, with_respect_to: &VariableSpec) -> Result<usize> {
        self.layout
            .iter()
            .position(|v| v == with_respect_to)
            .ok_or_else(|| {
                Error::domain(format!(
                    "{with_respect_to} is not a variable of this dictionary's layout"
                ))
            })
    }

    /// Partial derivatives of the standardized terms with respect to a raw
    /// variable: `∂raw_j / ∂v / scale_j`.
    pub fn eval_derivative(
        &self,
        raw: ArrayView1<'_, f64>,
        with_respect_to: &VariableSpec,
    ) -> Result<Array1<f64>> {
        self.check_len(raw.len())?;
        let target = self.target_index(with_respect_to)?;
        Ok((0..self.len())
            .map(|j| self.raw_term_derivative(j, raw, target) / self.standardization[j].scale)
            .collect())
    }

    /// Row-wise [`Dictionary::eval_derivative`].
    pub fn eval_derivative_rows(
        &self,
        raw: ArrayView2<'_, f64>,
        with_respect_to: &VariableSpec,
    ) -> Result<Array2<f64>> {
        self.check_len(raw.ncols())?;
        let target = self.target_index(with_respect_to)?;
        let mut out = Array2::zeros((raw.nrows(), self.len()));
        for (row, mut dst) in raw.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            for j in 0..self.len() {
                dst[j] = self.raw_term_derivative(j, row, target) / self.standardization[j].scale;
            }
        }
        Ok(out)
    }
}

/// Expand generator blocks against `layout` into an ordered, de-duplicated
/// dictionary.
///
/// `FullPoly` enumerates by total degree, then lexicographically with higher
/// powers of earlier variables first (`A, B, A², AB, B²`).
pub fn build_dictionary(
    generators: &[TermGenerator],
    layout: &[VariableSpec],
) -> Result<Dictionary> {
    if generators.is_empty() {
        return Err(Error::config("dictionary needs at least one generator"));
    }
    let resolve_all = |sel: &[VarSelector]| -> Result<Vec<VariableSpec>> {
        let mut out = Vec::new();
        for s in sel {
            out.extend(s.resolve(layout)?);
        }
        Ok(out)
    };
    let mut terms = Vec::new();
    for g in generators {
        match g {
            TermGenerator::Intercept => terms.push(BasisTerm::intercept()),
            TermGenerator::Powers {
                vars,
                min_degree,
                max_degree,
            } => {
                if *min_degree == 0 || max_degree < min_degree {
                    return Err(Error::config(format!(
                        "invalid power range {min_degree}..={max_degree}"
                    )));
                }
                for v in resolve_all(vars)? {
                    for p in *min_degree..=*max_degree {
                        terms.push(BasisTerm::monomial(vec![(v, p)]));
                    }
                }
            }
            TermGenerator::Interactions {
                left,
                right,
                left_degree,
                right_degree,
            } => {
                if *left_degree == 0 || *right_degree == 0 {
                    return Err(Error::config("interaction degrees must be positive"));
                }
                let (l, r) = (resolve_all(left)?, resolve_all(right)?);
                for a in &l {
                    for b in &r {
                        for j in 1..=*left_degree {
                            for k in 1..=*right_degree {
                                terms.push(BasisTerm::monomial(vec![(*a, j), (*b, k)]));
                            }
                        }
                    }
                }
            }
            TermGenerator::FullPoly { vars, max_degree } => {
                if *max_degree == 0 {
                    return Err(Error::config("full_poly max_degree must be positive"));
                }
                let vs = resolve_all(vars)?;
                for deg in 1..=*max_degree {
                    let mut exps = vec![0u32; vs.len()];
                    enumerate_exponents(&mut exps, 0, deg, &mut |e| {
                        terms.push(BasisTerm::monomial(
                            e.iter()
                                .enumerate()
                                .filter(|(_, &p)| p > 0)
                                .map(|(i, &p)| (vs[i], p))
                                .collect(),
                        ));
                    });
                }
            }
        }
    }
    Dictionary::from_terms(terms, layout)
}

fn enumerate_exponents(exps: &mut [u32], pos: usize, remaining: u32, emit: &mut dyn FnMut(&[u32])) {
    if pos == exps.len() - 1 {
        exps[pos] = remaining;
        emit(exps);
        exps[pos] = 0;
        return;
    }
    for p in (0..=remaining).rev() {
        exps[pos] = p;
        enumerate_exponents(exps, pos + 1, remaining - p, emit);
    }
    exps[pos] = 0;
}

/// Fit per-term mean and population standard deviation on `sample` rows.
/// The intercept keeps the identity transform; near-constant terms get
/// scale 1 and are flagged degenerate.
pub fn fit_standardization(dict: Dictionary, sample: ArrayView2<'_, f64>) -> Result<Dictionary> {
    dict.check_len(sample.ncols())?;
    let n = sample.nrows();
    if n < 2 {
        return Err(Error::config("standardization needs at least two rows"));
    }
    let mut sums = vec![0.0; dict.len()];
    let mut sq = vec![0.0; dict.len()];
    // two passes keep the variance numerically clean
    for row in sample.axis_iter(Axis(0)) {
        for (j, sum) in sums.iter_mut().enumerate() {
            *sum += dict.raw_term(j, row);
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    for row in sample.axis_iter(Axis(0)) {
        for (j, acc) in sq.iter_mut().enumerate() {
            let dev = dict.raw_term(j, row) - means[j];
            *acc += dev * dev;
        }
    }
    let scales = (0..dict.len())
        .map(|j| {
            if dict.terms[j].is_intercept() {
                return TermScale::IDENTITY;
            }
            let sd = (sq[j] / n as f64).sqrt();
            if sd < DEGENERATE_SD {
                TermScale {
                    mean: means[j],
                    scale: 1.0,
                    degenerate: true,
                }
            } else {
                TermScale {
                    mean: means[j],
                    scale: sd,
                    degenerate: false,
                }
            }
        })
        .collect();
    dict.with_standardization(scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn panel(n: usize, t: usize, l: usize) -> PanelDataset {
        let y = Array2::from_shape_fn((n, t), |(i, p)| (i * 100 + p) as f64);
        let d = Array2::from_shape_fn((n, t), |(i, p)| (i * 10 + p) as f64 + 0.5);
        let x = Array3::from_shape_fn((n, t, l), |(i, p, c)| (i + p * 7 + c * 3) as f64 * 0.1);
        PanelDataset::new(y, d, x, Array3::zeros((n, t, 0)), Array2::zeros((n, 0))).unwrap()
    }

    #[test]
    fn v_lengths() {
        let p = panel(3, 6, 1);
        let v = assemble_v(&p, 4, LagOrders { q: 0, p: 0 }, Model::Static).unwrap();
        assert_eq!(v.layout.len(), 2);
        assert_eq!(v.values[[1, 0]], p.covariates[[1, 3, 0]]);
        assert_eq!(v.values[[1, 1]], p.treatment[[1, 3]]);
        let p5 = panel(3, 6, 5);
        assert_eq!(
            assemble_v(&p5, 4, LagOrders { q: 1, p: 0 }, Model::Static)
                .unwrap()
                .layout
                .len(),
            12
        );
        let dynamic = assemble_v(&p5, 4, LagOrders { q: 1, p: 0 }, Model::Dynamic).unwrap();
        assert_eq!(dynamic.layout.len(), 13);
        assert_eq!(dynamic.layout[0], VariableSpec::new(Role::Outcome, 1, 0));
        assert!(matches!(
            assemble_v(&p5, 1, LagOrders { q: 1, p: 0 }, Model::Static),
            Err(Error::Lag { .. })
        ));
    }

    #[test]
    fn z_history_and_truncation() {
        let p = panel(3, 6, 1);
        let z = assemble_z(&p, 2, 0, Model::Static, &[0]).unwrap();
        assert_eq!(
            z.layout,
            vec![
                VariableSpec::new(Role::Covariate, 1, 0),
                VariableSpec::treatment(1)
            ]
        );
        assert_eq!(z.values[[2, 1]], p.treatment[[2, 0]]);
        let z = assemble_z(&p, 3, 1, Model::Static, &[0]).unwrap();
        assert!(z.layout.iter().all(|v| v.lag == 2));
        assert!(matches!(
            assemble_z(&p, 3, 1, Model::Dynamic, &[0]),
            Err(Error::Lag { .. })
        ));
        let dz = assemble_z(&p, 4, 0, Model::Dynamic, &[0]).unwrap();
        assert_eq!(dz.layout[0], VariableSpec::new(Role::Outcome, 3, 0));
        assert_eq!(dz.layout[1], VariableSpec::new(Role::Outcome, 2, 0));
    }

    fn dv_layout() -> Layout {
        vec![
            VariableSpec::new(Role::Covariate, 0, 0),
            VariableSpec::treatment(0),
        ]
    }

    #[test]
    fn powers_and_full_poly() {
        let layout = dv_layout();
        let d = build_dictionary(
            &[TermGenerator::Powers {
                vars: vec![VarSelector::new(Role::Treatment, 0)],
                min_degree: 1,
                max_degree: 3,
            }],
            &layout,
        )
        .unwrap();
        let names: Vec<String> = d.terms().iter().map(|t| t.to_string()).collect();
        assert_eq!(names, vec!["D[t-0]", "D[t-0]^2", "D[t-0]^3"]);

        let a = layout[1];
        let b = layout[0];
        let fp = build_dictionary(
            &[TermGenerator::FullPoly {
                vars: vec![
                    VarSelector::new(Role::Treatment, 0),
                    VarSelector::new(Role::Covariate, 0),
                ],
                max_degree: 2,
            }],
            &layout,
        )
        .unwrap();
        // canonical factor order follows the layout
        let expect = vec![
            BasisTerm::monomial(vec![(a, 1)]),
            BasisTerm::monomial(vec![(b, 1)]),
            BasisTerm::monomial(vec![(a, 2)]),
            BasisTerm::monomial(vec![(b, 1), (a, 1)]),
            BasisTerm::monomial(vec![(b, 2)]),
        ];
        assert_eq!(fp.terms(), expect.as_slice());
    }

    #[test]
    fn intercept_first_and_dedup() {
        let layout = dv_layout();
        let d = build_dictionary(
            &[
                TermGenerator::Intercept,
                TermGenerator::Powers {
                    vars: vec![VarSelector::new(Role::Treatment, 0)],
                    min_degree: 1,
                    max_degree: 2,
                },
                TermGenerator::Interactions {
                    left: vec![VarSelector::new(Role::Treatment, 0)],
                    right: vec![VarSelector::new(Role::Treatment, 0)],
                    left_degree: 1,
                    right_degree: 1,
                },
            ],
            &layout,
        )
        .unwrap();
        // D*D collapses onto D^2
        assert_eq!(d.len(), 3);
        assert!(d.terms()[0].is_intercept());
        assert!(matches!(
            build_dictionary(
                &[TermGenerator::FullPoly {
                    vars: vec![VarSelector::new(Role::Treatment, 0)],
                    max_degree: 0
                }],
                &layout
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn standardization_examples() {
        let layout = vec![VariableSpec::treatment(0)];
        let d = build_dictionary(
            &[
                TermGenerator::Intercept,
                TermGenerator::Powers {
                    vars: vec![VarSelector::new(Role::Treatment, 0)],
                    min_degree: 1,
                    max_degree: 1,
                },
            ],
            &layout,
        )
        .unwrap();
        let fitted = fit_standardization(d.clone(), array![[1.0], [3.0]].view()).unwrap();
        assert_eq!(fitted.standardization()[0], TermScale::IDENTITY);
        assert_eq!(fitted.standardization()[1].mean, 2.0);
        assert_eq!(fitted.standardization()[1].scale, 1.0);
        let constant = fit_standardization(d, array![[5.0], [5.0], [5.0]].view()).unwrap();
        assert!(constant.standardization()[1].degenerate);
        assert_eq!(constant.standardization()[1].scale, 1.0);
        assert_eq!(constant.degenerate_terms(), vec![1]);
    }

    #[test]
    fn evaluation_examples() {
        let layout = vec![VariableSpec::treatment(0)];
        let ic = build_dictionary(&[TermGenerator::Intercept], &layout).unwrap();
        assert_eq!(ic.eval(array![7.0].view()).unwrap(), array![1.0]);
        let d = build_dictionary(
            &[TermGenerator::Powers {
                vars: vec![VarSelector::new(Role::Treatment, 0)],
                min_degree: 1,
                max_degree: 2,
            }],
            &layout,
        )
        .unwrap();
        assert_eq!(d.eval(array![2.0].view()).unwrap(), array![2.0, 4.0]);
        let shifted = d
            .clone()
            .with_standardization(vec![
                TermScale {
                    mean: 2.0,
                    scale: 1.0,
                    degenerate: false
                };
                2
            ])
            .unwrap();
        assert_eq!(shifted.eval(array![2.0].view()).unwrap(), array![0.0, 2.0]);
        assert!(matches!(
            d.eval(array![1.0, 2.0].view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn derivative_examples() {
        let layout = dv_layout();
        let d_var = layout[1];
        let x_var = layout[0];
        let dict = Dictionary::from_terms(
            vec![
                BasisTerm::monomial(vec![(d_var, 2)]),
                BasisTerm::monomial(vec![(d_var, 1), (x_var, 1)]),
                BasisTerm::monomial(vec![(x_var, 3)]),
            ],
            &layout,
        )
        .unwrap();
        let g = dict
            .eval_derivative(array![2.0, 3.0].view(), &d_var)
            .unwrap();
        assert_eq!(g, array![6.0, 2.0, 0.0]);
        assert!(matches!(
            dict.eval_derivative(array![2.0, 3.0].view(), &VariableSpec::treatment(4)),
            Err(Error::Domain(_))
        ));
    }
}
