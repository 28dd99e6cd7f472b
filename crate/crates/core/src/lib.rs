//! Debiased machine learning for average derivatives in dynamic panels.
//!
//! The pipeline runs from a balanced [`PanelDataset`] through differenced,
//! cross-fold demeaned designs to a penalized first stage, a penalized Riesz
//! representer and a cross-fitted debiased estimate with a standard error.

pub mod data;
pub mod design;
pub mod error;
pub mod estimator;
pub mod features;
pub mod riesz;
pub mod seed;
pub mod simulation;
pub mod solver;

pub use data::{load_panel, split_folds, FoldPartition, PanelDataset, PanelSchema};
pub use design::EstimandDesign;
pub use error::{Error, Result};
pub use estimator::{
    aggregate, estimate_all, estimate_requests, CrossFitConfig, Estimand, EstimandRequest,
    EstimateReport, EstimatorSpec, GammaMethod, GammaSpec, Preset,
};
pub use features::{LagOrders, Model};
pub use riesz::{PenaltySpec, RieszSpec};
pub use simulation::{
    run_monte_carlo, simulate, DgpSpec, DgpVariant, McConfig, McMetrics, McStudy,
};
pub use solver::{MomentSystem, PenalizedSolution, SolverOptions};
