//! Zero-inflated count and occupancy models for site-occupancy surveys.
//!
//! A site is occupied with some probability, and an occupied site yields
//! either a count of sightings (Poisson) or a number of detections out of a
//! fixed number of visits (binomial); unoccupied sites always yield zero.
//! This crate fits such models by full maximum likelihood or by a two-stage
//! conditional approach that first fits the detection side on the detected
//! sites alone and then solves for the presence side, which keeps the
//! presence estimate stable when the detection-rate model is wrong.
//!
//! Beyond the fitters ([`model::fit`] dispatches on a [`model::ModelSpec`]),
//! the crate quantifies the bias a constant-rate model incurs under
//! unmodelled rate heterogeneity ([`robust::bias_rho`]), provides an inverse
//! detection-probability weighted estimator of the average presence
//! probability with a variance estimate ([`robust::ht_psi_bar`]), and ships a
//! seeded simulation harness ([`sim`]) that reproduces the Monte Carlo
//! designs used to study these estimators.

pub mod data;
pub mod error;
pub mod fit;
pub mod model;
pub mod optim;
pub mod robust;
pub mod sim;
mod twostage;
pub mod zib;
pub mod zip;

pub use data::{aggregate, ColumnSchema, Dataset, Family, FrequencyTable, SiteRecord};
pub use error::{Error, Result};
pub use fit::{FitResult, Method};
pub use model::{fit, DetectionComponent, Formula, ModelSpec, OccurrenceComponent};
pub use robust::{bias_rho, ht_psi_bar, ht_variance, limit_omega, BiasReport, HtEstimate};
pub use sim::{
    bias_curve, generate, run_study, summarize, BiasCurveRow, FitterConfig, Scenario,
    ScenarioConfig, StudyOutput, SummaryRow, SummaryTable,
};
