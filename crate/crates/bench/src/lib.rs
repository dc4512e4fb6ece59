//! Dataset builders shared by the criterion benchmarks.
//!
//! Each builder draws one replicate from the simulation harness so the
//! benches exercise the fitters on realistic survey shapes.

use occufit_core::sim::{CovariateCase, CovariateDesign, Scenario, ScenarioConfig};
use occufit_core::{generate, Dataset};

fn base(scenario: Scenario) -> ScenarioConfig {
    ScenarioConfig {
        scenario,
        n: 200,
        replicates: 2,
        seed: 90210,
        visits: 5,
        psi: None,
        mu: None,
        kappa: None,
        theta: None,
        gamma: None,
        covariate_case: CovariateCase::I,
        covariate_design: CovariateDesign::PerReplicate,
        covariate_seed: None,
        logit_scale_ci: false,
        fitters: Vec::new(),
    }
}

/// Counts from a gamma-mixed rate; smaller `kappa` means more heterogeneity.
pub fn mixed_counts(kappa: f64) -> Dataset {
    let mut config = base(Scenario::A);
    config.psi = Some(0.5);
    config.mu = Some(2.0);
    config.kappa = Some(kappa);
    generate(&config, 0).expect("valid design")
}

/// Counts whose log rate depends on two standard-normal site covariates.
pub fn covariate_counts() -> Dataset {
    let mut config = base(Scenario::B);
    config.psi = Some(0.75);
    config.theta = Some(vec![1.0, -1.0, 1.0]);
    generate(&config, 0).expect("valid design")
}

/// Detection histories where detection and presence both vary by site.
pub fn covariate_detections() -> Dataset {
    let mut config = base(Scenario::ZibC);
    config.theta = Some(vec![1.0, 1.0, 1.0]);
    config.gamma = Some(vec![1.0, 1.0]);
    generate(&config, 0).expect("valid design")
}
