//! Balanced panel storage, fold partitioning and the two transforms that strip
//! the fixed effects: `s`-lag differencing (unit effects) and cross-fold
//! demeaning (period effects).
//!
//! Periods are 1-based everywhere in the public API (`t = 1..=T`), matching
//! how estimands are written (`θ_t(s)`). Units and folds are 0-based indices.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Cell, Error, Result};

/// Smallest fold count for which the reduced fold set used to build the
/// nuisance moments still has a demeaning partner for every member.
pub const MIN_FOLDS: usize = 4;

/// Balanced `N × T` panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    /// `N × T`
    pub outcome: Array2<f64>,
    /// `N × T`
    pub treatment: Array2<f64>,
    /// `N × T × L`
    pub covariates: Array3<f64>,
    /// `N × T × M`, `M` may be zero.
    pub instruments: Array3<f64>,
    /// `N × P`, `P` may be zero.
    pub invariant_covariates: Array2<f64>,
    pub unit_ids: Vec<String>,
    pub period_labels: Vec<String>,
}

impl PanelDataset {
    /// Assemble a panel from already-shaped arrays, checking that every block
    /// agrees on `N` and `T` and that nothing is non-finite.
    pub fn new(
        outcome: Array2<f64>,
        treatment: Array2<f64>,
        covariates: Array3<f64>,
        instruments: Array3<f64>,
        invariant_covariates: Array2<f64>,
    ) -> Result<Self> {
        let (n, t) = outcome.dim();
        if n == 0 || t == 0 {
            return Err(Error::config(
                "panel must have at least one unit and one period",
            ));
        }
        let check = |name: &str, got: (usize, usize)| {
            if got != (n, t) {
                Err(Error::config(format!(
                    "{name} has shape {got:?}, expected ({n}, {t})"
                )))
            } else {
                Ok(())
            }
        };
        check("treatment", treatment.dim())?;
        check("covariates", (covariates.dim().0, covariates.dim().1))?;
        check("instruments", (instruments.dim().0, instruments.dim().1))?;
        if invariant_covariates.nrows() != n {
            return Err(Error::config(format!(
                "invariant covariates have {} rows, expected {n}",
                invariant_covariates.nrows()
            )));
        }
        let all_finite = outcome.iter().all(|v| v.is_finite())
            && treatment.iter().all(|v| v.is_finite())
            && covariates.iter().all(|v| v.is_finite())
            && instruments.iter().all(|v| v.is_finite())
            && invariant_covariates.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Numeric("panel contains non-finite values".into()));
        }
        Ok(Self {
            outcome,
            treatment,
            covariates,
            instruments,
            invariant_covariates,
            unit_ids: (1..=n).map(|i| i.to_string()).collect(),
            period_labels: (1..=t).map(|i| i.to_string()).collect(),
        })
    }

    pub fn n_units(&self) -> usize {
        self.outcome.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcome.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.dim().2
    }

    pub fn n_instruments(&self) -> usize {
        self.instruments.dim().2
    }

    pub fn n_invariant(&self) -> usize {
        self.invariant_covariates.ncols()
    }

    /// Copy of the panel with every time-varying and invariant value of the
    /// listed units replaced through `f(unit, value)`. Used by isolation tests.
    pub fn map_units(&self, units: &[usize], f: impl Fn(usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for &i in units {
            out.outcome.row_mut(i).mapv_inplace(|v| f(i, v));
            out.treatment.row_mut(i).mapv_inplace(|v| f(i, v));
            out.covariates
                .index_axis_mut(ndarray::Axis(0), i)
                .mapv_inplace(|v| f(i, v));
            out.instruments
                .index_axis_mut(ndarray::Axis(0), i)
                .mapv_inplace(|v| f(i, v));
            out.invariant_covariates
                .row_mut(i)
                .mapv_inplace(|v| f(i, v));
        }
        out
    }
}

/// Column mapping for long-format input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSchema {
    #[serde(default = "default_unit")]
    pub unit: String,
    #[serde(default = "default_period")]
    pub period: String,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_treatment")]
    pub treatment: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub instruments: Vec<String>,
    #[serde(default)]
    pub invariant: Vec<String>,
}

fn default_unit() -> String {
    "unit".into()
}
fn default_period() -> String {
    "period".into()
}
fn default_outcome() -> String {
    "y".into()
}
fn default_treatment() -> String {
    "d".into()
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            unit: default_unit(),
            period: default_period(),
            outcome: default_outcome(),
            treatment: default_treatment(),
            covariates: Vec::new(),
            instruments: Vec::new(),
            invariant: Vec::new(),
        }
    }
}

impl PanelSchema {
    /// Infer the canonical layout from a header row: `unit, period, y, d`,
    /// then `x_1..x_L`, `i_1..i_M`, `c_1..c_P` in numeric order.
    pub fn infer(headers: &[&str]) -> Self {
        let numbered = |prefix: &str| {
            let mut cols: Vec<(usize, String)> = headers
                .iter()
                .filter_map(|h| {
                    h.strip_prefix(prefix)
                        .and_then(|rest| rest.parse::<usize>().ok())
                        .map(|k| (k, h.to_string()))
                })
                .collect();
            cols.sort();
            cols.into_iter().map(|(_, h)| h).collect::<Vec<_>>()
        };
        Self {
            covariates: numbered("x_"),
            instruments: numbered("i_"),
            invariant: numbered("c_"),
            ..Self::default()
        }
    }
}

/// Read a long-format CSV (one row per unit-period) into a balanced panel.
///
/// Rows may arrive in any order. Units are ordered numerically when every
/// label parses as an integer, lexicographically otherwise. Period labels must
/// be integers forming a contiguous range; they are mapped to `1..=T`.
pub fn load_panel<R: Read>(source: R, schema: Option<&PanelSchema>) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let header_refs: Vec<&str> = headers.iter().collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => PanelSchema::infer(&header_refs),
    };
    let col = |name: &str| -> Result<usize> {
        header_refs
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::config(format!("column `{name}` not found in input header")))
    };
    let unit_col = col(&schema.unit)?;
    let period_col = col(&schema.period)?;
    let y_col = col(&schema.outcome)?;
    let d_col = col(&schema.treatment)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let i_cols = schema
        .instruments
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let c_cols = schema
        .invariant
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    struct Row {
        y: f64,
        d: f64,
        x: Vec<f64>,
        i: Vec<f64>,
        c: Vec<f64>,
    }

    let mut cells: HashMap<(String, i64), Row> = HashMap::new();
    let mut period_raw: HashMap<i64, String> = HashMap::new();
    for (idx, record) in reader.records().enumerate() {
        // 1-based data row index, header excluded
        let row_no = idx + 1;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64> {
            let raw = field(c);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row: row_no,
                    message: format!(
                        "column `{}`: `{raw}` is not a finite number",
                        header_refs[c]
                    ),
                })
        };
        let unit = field(unit_col).to_string();
        let period_label = field(period_col);
        let period: i64 = period_label.parse().map_err(|_| Error::Parse {
            row: row_no,
            message: format!("period `{period_label}` is not an integer"),
        })?;
        let row = Row {
            y: num(y_col)?,
            d: num(d_col)?,
            x: x_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            i: i_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            c: c_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
        };
        period_raw
            .entry(period)
            .or_insert_with(|| period_label.to_string());
        if cells.insert((unit.clone(), period), row).is_some() {
            return Err(Error::Duplicate(Cell {
                unit,
                period: period_label.to_string(),
            }));
        }
    }
    if cells.is_empty() {
        return Err(Error::config("input contains no data rows"));
    }

    let mut units: Vec<String> = cells.keys().map(|(u, _)| u.clone()).collect();
    units.sort();
    units.dedup();
    if units.iter().all(|u| u.parse::<i64>().is_ok()) {
        units.sort_by_key(|u| u.parse::<i64>().unwrap());
    }
    let periods: BTreeMap<i64, String> = period_raw.into_iter().collect();
    let (first, last) = (
        *periods.keys().next().unwrap(),
        *periods.keys().next_back().unwrap(),
    );
    if (last - first + 1) as usize != periods.len() {
        return Err(Error::domain(format!(
            "period labels must be contiguous; found {} distinct labels spanning {first}..={last}",
            periods.len()
        )));
    }

    let (n, t) = (units.len(), periods.len());
    let (l, m, p) = (x_cols.len(), i_cols.len(), c_cols.len());
    let mut y = Array2::zeros((n, t));
    let mut d = Array2::zeros((n, t));
    let mut x = Array3::zeros((n, t, l));
    let mut inst = Array3::zeros((n, t, m));
    let mut c = Array2::zeros((n, p));
    let mut missing = Vec::new();
    for (ui, unit) in units.iter().enumerate() {
        for (ti, (period, label)) in periods.iter().enumerate() {
            let Some(row) = cells.get(&(unit.clone(), *period)) else {
                missing.push(Cell {
                    unit: unit.clone(),
                    period: label.clone(),
                });
                continue;
            };
            y[[ui, ti]] = row.y;
            d[[ui, ti]] = row.d;
            for k in 0..l {
                x[[ui, ti, k]] = row.x[k];
            }
            for k in 0..m {
                inst[[ui, ti, k]] = row.i[k];
            }
            for k in 0..p {
                if ti == 0 {
                    c[[ui, k]] = row.c[k];
                } else if row.c[k] != c[[ui, k]] {
                    return Err(Error::domain(format!(
                        "invariant covariate `{}` varies over time for unit {unit}",
                        schema.invariant[k]
                    )));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Balance { missing });
    }
    let mut panel = PanelDataset::new(y, d, x, inst, c)?;
    panel.unit_ids = units;
    panel.period_labels = periods.into_values().collect();
    Ok(panel)
}

/// A `K`-way split of the units. Fold indices are 0-based; each fold lists
/// its units in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldPartition {
    /// Build from explicit folds; they must be disjoint, non-empty and cover
    /// `0..n_units`.
    pub fn from_folds(mut folds: Vec<Vec<usize>>, n_units: usize, seed: u64) -> Result<Self> {
        if folds.len() < MIN_FOLDS {
            return Err(Error::config(format!(
                "need at least {MIN_FOLDS} folds, got {}",
                folds.len()
            )));
        }
        let mut seen = vec![false; n_units];
        for fold in &mut folds {
            if fold.is_empty() {
                return Err(Error::config("empty fold"));
            }
            fold.sort_unstable();
            for &i in fold.iter() {
                if i >= n_units || seen[i] {
                    return Err(Error::config(format!("unit {i} out of range or repeated")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("folds do not cover every unit"));
        }
        Ok(Self { folds, seed })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        self.folds.iter().map(Vec::len).collect()
    }

    pub fn n_units(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    pub fn fold(&self, k: usize) -> &[usize] {
        &self.folds[k]
    }

    /// Fold membership per unit.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_units()];
        for (k, fold) in self.folds.iter().enumerate() {
            for &i in fold {
                out[i] = k;
            }
        }
        out
    }

    /// The demeaning partner `π(k, {0..K-1})` of fold `k`.
    pub fn partner(&self, k: usize) -> usize {
        (k + 1) % self.k()
    }

    /// Folds `{0..K-1} \ {k, π(k)}` in ascending order.
    pub fn estimation_folds(&self, k: usize) -> Vec<usize> {
        let kp = self.partner(k);
        (0..self.k()).filter(|&j| j != k && j != kp).collect()
    }
}

/// Randomly split `n_units` into `k` near-equal folds.
///
/// Units are shuffled with a ChaCha8 stream seeded by `seed`; the shuffled
/// order is cut into consecutive chunks, the first `n_units % k` folds
/// receiving one extra unit.
pub fn split_folds(n_units: usize, k: usize, seed: u64) -> Result<FoldPartition> {
    if k < MIN_FOLDS {
        return Err(Error::config(format!(
            "fold count must be at least {MIN_FOLDS} (got {k}); with fewer folds the reduced set has a fold demeaned against itself"
        )));
    }
    if n_units < k {
        return Err(Error::config(format!(
            "cannot split {n_units} units into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_units).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n_units / k;
    let extra = n_units % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(FoldPartition { folds, seed })
}

/// Cyclic successor of `fold` within the ordered set `set` (sorted internally).
pub fn fold_successor(fold: usize, set: &[usize]) -> Result<usize> {
    let mut sorted = set.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let j = sorted
        .iter()
        .position(|&a| a == fold)
        .ok_or_else(|| Error::domain(format!("fold {fold} is not in {sorted:?}")))?;
    Ok(sorted[(j + 1) % sorted.len()])
}

/// Earliest period touched by an `s`-gap difference at `t`.
pub(crate) fn base_period(t: usize, s: usize) -> i64 {
    t as i64 - s as i64 - 1
}

/// `V_{it} − V_{i,t−s−1}` for every unit; `values` is `N × T`.
pub fn difference(values: ArrayView2<'_, f64>, t: usize, s: usize) -> Result<Array1<f64>> {
    let periods = values.ncols();
    if t == 0 || t > periods {
        return Err(Error::domain(format!("period {t} outside 1..={periods}")));
    }
    let base = base_period(t, s);
    if base < 1 {
        return Err(Error::Lag {
            what: format!("difference at t={t}, s={s}"),
            required: base,
        });
    }
    Ok(&values.column(t - 1) - &values.column(base as usize - 1))
}

/// Mean of `values` over the units of `fold`.
pub(crate) fn fold_mean(values: ArrayView1<'_, f64>, fold: &[usize]) -> f64 {
    fold.iter().map(|&i| values[i]).sum::<f64>() / fold.len() as f64
}

/// Values of the units in `target_fold`, minus the cross-sectional mean over
/// `demeaning_fold`. Output follows the target fold's unit order.
pub fn cross_fold_demean(
    differenced: ArrayView1<'_, f64>,
    partition: &FoldPartition,
    target_fold: usize,
    demeaning_fold: usize,
) -> Result<Array1<f64>> {
    if target_fold == demeaning_fold {
        return Err(Error::SelfDemean(target_fold));
    }
    if target_fold >= partition.k() || demeaning_fold >= partition.k() {
        return Err(Error::domain(format!(
            "fold index out of range for K={}",
            partition.k()
        )));
    }
    if differenced.len() != partition.n_units() {
        return Err(Error::Shape {
            expected: partition.n_units(),
            actual: differenced.len(),
        });
    }
    let centre = fold_mean(differenced, partition.fold(demeaning_fold));
    Ok(partition
        .fold(target_fold)
        .iter()
        .map(|&i| differenced[i] - centre)
        .collect())
}
