//! Per-estimand raw blocks and the fold bookkeeping shared by the nuisance
//! fits and the final cross-fitted average.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::{difference, fold_successor, FoldPartition, PanelDataset};
use crate::error::{Error, Result};
use crate::features::{assemble_v, assemble_z, LagOrders, Model, RawBlock, VariableSpec};

/// Raw inputs for the effect at period `t` of the treatment `s` periods back.
#[derive(Debug, Clone)]
pub struct EstimandDesign {
    pub t: usize,
    pub s: usize,
    pub model: Model,
    pub lags: LagOrders,
    /// `V_{it}`.
    pub v_now: RawBlock,
    /// `V_{i,t−s−1}`, same layout as `v_now`.
    pub v_base: RawBlock,
    /// `Z_{it}`.
    pub z: RawBlock,
    /// `ΔY_{it} = Y_{it} − Y_{i,t−s−1}`.
    pub dy: Array1<f64>,
    /// `D_{i,t−s}` as a position of the `V` layout.
    pub target: VariableSpec,
}

impl EstimandDesign {
    /// `exogenous` lists the covariate columns allowed into `Z`.
    pub fn new(
        panel: &PanelDataset,
        t: usize,
        s: usize,
        lags: LagOrders,
        model: Model,
        exogenous: &[usize],
    ) -> Result<Self> {
        if s > lags.q {
            return Err(Error::config(format!(
                "treatment lag s={s} exceeds the structural lag order q={}",
                lags.q
            )));
        }
        let name = |e: Error| match e {
            Error::Lag { what, required } => Error::Lag {
                what: format!("theta_{t}({s}) [{what}]"),
                required,
            },
            other => other,
        };
        let base = t as i64 - s as i64 - 1;
        if base < 1 {
            return Err(Error::Lag {
                what: format!("theta_{t}({s}) [difference base period]"),
                required: base,
            });
        }
        let v_now = assemble_v(panel, t, lags, model).map_err(name)?;
        let v_base = assemble_v(panel, base as usize, lags, model).map_err(name)?;
        let z = assemble_z(panel, t, s, model, exogenous).map_err(name)?;
        let dy = difference(panel.outcome.view(), t, s).map_err(name)?;
        Ok(Self {
            t,
            s,
            model,
            lags,
            v_now,
            v_base,
            z,
            dy,
            target: VariableSpec::treatment(s as i64),
        })
    }

    pub fn n_units(&self) -> usize {
        self.dy.len()
    }
}

/// Units used to fit the nuisances for held-out fold `k`: folds
/// `R = {0..K−1} \ {k, k′}` in ascending order, each demeaned against its
/// successor within `R`.
#[derive(Debug, Clone)]
pub struct EstimationSet {
    pub held_out: usize,
    pub partner: usize,
    /// Units of `R`, fold-major, ascending within each fold.
    pub units: Vec<usize>,
    /// `(fold, demeaning fold, offset into units, len)` per fold of `R`.
    blocks: Vec<(usize, usize, usize, usize)>,
}

impl EstimationSet {
    pub fn new(partition: &FoldPartition, k: usize) -> Result<Self> {
        if k >= partition.k() {
            return Err(Error::domain(format!(
                "fold {k} out of range for K={}",
                partition.k()
            )));
        }
        let partner = partition.partner(k);
        let reduced = partition.estimation_folds(k);
        if reduced.len() < 2 {
            return Err(Error::config(format!(
                "held-out fold {k} leaves {} estimation fold(s); at least two are needed",
                reduced.len()
            )));
        }
        let mut units = Vec::new();
        let mut spans = Vec::new();
        for &f in &reduced {
            spans.push((f, units.len(), partition.fold(f).len()));
            units.extend_from_slice(partition.fold(f));
        }
        let blocks = spans
            .iter()
            .map(|&(f, off, len)| Ok((f, fold_successor(f, &reduced)?, off, len)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            held_out: k,
            partner,
            units,
            blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// `(fold, demeaning fold)` pairs in order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| (b.0, b.1)).collect()
    }

    fn span_of(&self, fold: usize) -> (usize, usize) {
        let b = self
            .blocks
            .iter()
            .find(|b| b.0 == fold)
            .expect("fold in set");
        (b.2, b.3)
    }

    /// Demean rows given in `units` order, each fold against its partner.
    pub fn demean(&self, local: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = local.to_owned();
        for &(_, partner, off, len) in &self.blocks {
            let (poff, plen) = self.span_of(partner);
            let centre = local
                .slice(ndarray::s![poff..poff + plen, ..])
                .mean_axis(Axis(0))
                .expect("non-empty fold");
            let mut rows = out.slice_mut(ndarray::s![off..off + len, ..]);
            rows -= &centre;
        }
        out
    }

    pub fn demean_vec(&self, local: ArrayView1<'_, f64>) -> Array1<f64> {
        self.demean(local.insert_axis(Axis(1))).column(0).to_owned()
    }
}

/// Rows of `all` (indexed by unit) picked in `units` order.
pub fn take_rows(all: ArrayView2<'_, f64>, units: &[usize]) -> Array2<f64> {
    all.select(Axis(0), units)
}

pub fn take(all: ArrayView1<'_, f64>, units: &[usize]) -> Array1<f64> {
    units.iter().map(|&i| all[i]).collect()
}

/// `values` rows of fold `target` minus the mean row of fold `demeaning`.
pub fn demean_fold_rows(
    all: ArrayView2<'_, f64>,
    partition: &FoldPartition,
    target: usize,
    demeaning: usize,
) -> Result<Array2<f64>> {
    if target == demeaning {
        return Err(Error::SelfDemean(target));
    }
    let centre = take_rows(all, partition.fold(demeaning))
        .mean_axis(Axis(0))
        .expect("non-empty fold");
    Ok(take_rows(all, partition.fold(target)) - &centre)
}
