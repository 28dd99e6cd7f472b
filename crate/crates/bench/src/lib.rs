//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use panel_dml::riesz::RieszMoments;
use panel_dml::solver::MomentSystem;
use panel_dml::{
    simulate, CrossFitConfig, DgpSpec, DgpVariant, EstimandDesign, FoldPartition, PanelDataset,
    RieszSpec,
};

pub fn panel(n_units: usize, n_covariates: usize) -> PanelDataset {
    simulate(&DgpSpec {
        variant: DgpVariant::Dgp1,
        n_units,
        n_periods: 10,
        n_covariates,
        seed: 2024,
    })
    .expect("valid simulation settings")
}

pub fn design(panel: &PanelDataset) -> (EstimandDesign, FoldPartition) {
    let cfg = CrossFitConfig::default();
    let partition = cfg.partition(panel.n_units()).expect("enough units");
    let design = cfg
        .design(panel, panel.n_periods(), 0)
        .expect("feasible estimand");
    (design, partition)
}

/// The representer moment system for held-out fold 0 with the standard
/// dictionaries.
pub fn riesz_system(panel: &PanelDataset) -> MomentSystem {
    let (design, partition) = design(panel);
    let spec = RieszSpec::standard();
    let (b, d) = spec
        .dictionaries(&design)
        .expect("standard dictionaries bind");
    let moments = RieszMoments::build(&design, &partition, 0, &b, &d, true).expect("moments");
    moments.sample.system(&spec.omega().expect("identity"))
}

/// Raw `V_t` rows of the design.
pub fn v_rows(design: &EstimandDesign) -> Array2<f64> {
    design.v_now.values.clone()
}
