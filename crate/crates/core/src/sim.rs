//! Seeded scenario generators, the replication driver, and the summary
//! metrics they feed.
//!
//! A study is described by a [`ScenarioConfig`] (usually loaded from TOML):
//! a named data-generating scenario, its parameters, and a list of fitters to
//! apply to every replicate. Replicate `r` draws from its own RNG stream, so
//! results do not depend on how many fitters run or on the worker count.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Binomial, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{aggregate, Dataset, Family, SiteRecord};
use crate::error::{Error, Result};
use crate::fit::Method;
use crate::model::{self, logistic, logit, DetectionComponent, ModelSpec, OccurrenceComponent};
use crate::robust::{bias_rho, ht_psi_bar};
use crate::zip;

/// Two-sided 95% normal quantile used for every Wald interval.
pub const WALD_Z: f64 = 1.959963984540054;

/// Data-generating designs.
///
/// The Poisson designs: `a` draws counts from a presence-thinned
/// gamma-mixed Poisson with dispersion `kappa` (homogeneous as `kappa` grows);
/// `b` is a log-linear count regression with constant presence; `c` keeps the
/// count regression and makes presence logistic in the first covariate. The
/// `zib-*` designs swap counts for detections out of `visits` visits, with a
/// beta-mixed detection probability in `zib-a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    A,
    B,
    C,
    ZibA,
    ZibB,
    ZibC,
}

impl Scenario {
    pub fn family(self) -> Family {
        match self {
            Scenario::A | Scenario::B | Scenario::C => Family::Poisson,
            _ => Family::Binomial,
        }
    }

    fn occurrence_varies(self) -> bool {
        matches!(self, Scenario::C | Scenario::ZibC)
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::A => "a",
            Scenario::B => "b",
            Scenario::C => "c",
            Scenario::ZibA => "zib-a",
            Scenario::ZibB => "zib-b",
            Scenario::ZibC => "zib-c",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Scenario::A),
            "b" => Ok(Scenario::B),
            "c" => Ok(Scenario::C),
            "zib-a" => Ok(Scenario::ZibA),
            "zib-b" => Ok(Scenario::ZibB),
            "zib-c" => Ok(Scenario::ZibC),
            _ => Err(Error::config(format!(
                "unknown scenario '{s}' (expected a, b, c, zib-a, zib-b or zib-c)"
            ))),
        }
    }
}

/// Covariate law for scenario `b`: case `i` draws both covariates standard
/// normal, case `ii` makes the first a fair Bernoulli.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovariateCase {
    #[default]
    I,
    Ii,
}

/// Whether covariates are redrawn for each replicate or drawn once and
/// shared by all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateDesign {
    #[default]
    PerReplicate,
    Fixed,
}

/// One model specification applied to every replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitterConfig {
    /// Label used in the per-replicate records and summary rows.
    pub name: String,
    pub method: Method,
    pub detection: DetectionComponent,
    pub occurrence: OccurrenceComponent,
    /// Report the inverse detection-probability weighted presence estimate
    /// from the detection stage instead of the model-based one. Requires a
    /// conditional-likelihood regression fit.
    #[serde(default)]
    pub ht: bool,
}

/// Full study description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Sites per replicate.
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Visits per site (binomial scenarios only).
    #[serde(default = "default_visits")]
    pub visits: u32,
    /// Presence probability (scenarios a and b).
    #[serde(default)]
    pub psi: Option<f64>,
    /// Mean of the rate (a) or detection-probability (zib-a) mixing
    /// distribution.
    #[serde(default)]
    pub mu: Option<f64>,
    /// Mixing dispersion (a) or precision (zib-a); larger is closer to
    /// homogeneous.
    #[serde(default)]
    pub kappa: Option<f64>,
    /// Detection coefficients on (1, x1, x2) for scenarios b and c.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    /// Occurrence coefficients on (1, x1) for scenario c.
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    #[serde(default)]
    pub covariate_case: CovariateCase,
    #[serde(default)]
    pub covariate_design: CovariateDesign,
    /// Seed for the fixed covariate draw; defaults to `seed`, and setting it
    /// keeps a fixed design stable when the run seed changes.
    #[serde(default)]
    pub covariate_seed: Option<u64>,
    /// Compute coverage with Wald intervals on the logit rather than the
    /// natural presence scale.
    #[serde(default)]
    pub logit_scale_ci: bool,
    pub fitters: Vec<FitterConfig>,
}

fn default_visits() -> u32 {
    5
}

impl ScenarioConfig {
    pub fn family(&self) -> Family {
        self.scenario.family()
    }

    /// Check the generator side of the config: scenario parameters and
    /// dimensions. Fitters are not consulted.
    pub fn validate_design(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n must be at least one site"));
        }
        let need_prob = |v: Option<f64>, name: &str| -> Result<f64> {
            let v = v.ok_or_else(|| {
                Error::config(format!("scenario {} requires '{name}'", self.scenario))
            })?;
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("'{name}' must lie in (0, 1)")));
            }
            Ok(v)
        };
        match self.scenario {
            Scenario::A | Scenario::ZibA => {
                need_prob(self.psi, "psi")?;
                let mu = self.mu.ok_or_else(|| {
                    Error::config(format!("scenario {} requires 'mu'", self.scenario))
                })?;
                match self.scenario {
                    Scenario::A if !(mu > 0.0) => {
                        return Err(Error::config("'mu' must be positive"));
                    }
                    Scenario::ZibA if !(mu > 0.0 && mu < 1.0) => {
                        return Err(Error::config(
                            "'mu' is a per-visit detection probability and must lie in (0, 1)",
                        ));
                    }
                    _ => {}
                }
                match self.kappa {
                    Some(k) if k > 0.0 => {}
                    _ => return Err(Error::config("'kappa' must be positive")),
                }
            }
            Scenario::B | Scenario::ZibB => {
                need_prob(self.psi, "psi")?;
                self.theta_checked()?;
            }
            Scenario::C | Scenario::ZibC => {
                self.theta_checked()?;
                match self.gamma.as_deref() {
                    Some([g0, g1]) if g0.is_finite() && g1.is_finite() => {}
                    _ => {
                        return Err(Error::config(
                            "scenario c requires 'gamma' with two finite entries",
                        ))
                    }
                }
            }
        }
        if self.family() == Family::Binomial && self.visits == 0 {
            return Err(Error::config("'visits' must be at least one"));
        }
        Ok(())
    }

    /// Full validation: generator parameters plus the replication and fitter
    /// sections.
    pub fn validate(&self) -> Result<()> {
        self.validate_design()?;
        if self.replicates < 2 {
            return Err(Error::config(
                "SD undefined with fewer than two replicates",
            ));
        }
        if self.fitters.is_empty() {
            return Err(Error::config("at least one fitter is required"));
        }
        let mut names: Vec<&str> = self.fitters.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.fitters.len() {
            return Err(Error::config("fitter names must be unique"));
        }
        let family = self.family();
        let has_covariates = !matches!(self.scenario, Scenario::A | Scenario::ZibA);
        let occurrence_varies = self.scenario.occurrence_varies();
        for fc in &self.fitters {
            let where_ = format!("fitter '{}'", fc.name);
            match &fc.detection {
                DetectionComponent::Regression(f) => {
                    if !f.intercept_only() && !has_covariates {
                        return Err(Error::config(format!(
                            "{where_}: scenario {} has no covariates",
                            self.scenario
                        )));
                    }
                    for c in f.columns() {
                        if c != "x1" && c != "x2" {
                            return Err(Error::config(format!(
                                "{where_}: unknown covariate '{c}'"
                            )));
                        }
                    }
                }
                DetectionComponent::GammaMixture | DetectionComponent::FiniteMixture(_)
                    if family != Family::Poisson =>
                {
                    return Err(Error::config(format!(
                        "{where_}: rate mixtures need a count scenario"
                    )));
                }
                DetectionComponent::BetaMixture if family != Family::Binomial => {
                    return Err(Error::config(format!(
                        "{where_}: a beta mixture needs a binomial scenario"
                    )));
                }
                DetectionComponent::FiniteMixture(c) if *c == 0 => {
                    return Err(Error::config(format!(
                        "{where_}: finite mixture needs at least one component"
                    )));
                }
                _ => {}
            }
            if let OccurrenceComponent::Regression(f) = &fc.occurrence {
                if !occurrence_varies {
                    return Err(Error::config(format!(
                        "{where_}: scenario {} carries no occurrence covariates",
                        self.scenario
                    )));
                }
                for c in f.columns() {
                    if c != "x1" && c != "x2" {
                        return Err(Error::config(format!("{where_}: unknown covariate '{c}'")));
                    }
                }
            }
            if fc.ht {
                if fc.method != Method::Cl {
                    return Err(Error::config(format!(
                        "{where_}: the weighted presence estimate needs method 'cl'"
                    )));
                }
                if !matches!(fc.detection, DetectionComponent::Regression(_)) {
                    return Err(Error::config(format!(
                        "{where_}: the weighted presence estimate needs a detection regression"
                    )));
                }
            }
        }
        Ok(())
    }

    fn theta_checked(&self) -> Result<&[f64]> {
        match self.theta.as_deref() {
            Some(t) if t.len() == 3 && t.iter().all(|v| v.is_finite()) => Ok(t),
            _ => Err(Error::config(
                "'theta' must hold three finite coefficients (intercept, x1, x2)",
            )),
        }
    }
}

/// Generate the dataset for one replicate.
///
/// Deterministic in `(seed, replicate)`: replicate `r` draws from RNG stream
/// `r + 1`. Stream 0 is reserved for the fixed covariate draw, so holding the
/// design fixed never perturbs the per-replicate randomness. Within a
/// replicate the draw order is covariates, then per site presence followed by
/// its count.
pub fn generate(config: &ScenarioConfig, replicate: usize) -> Result<Dataset> {
    config.validate_design()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(replicate as u64 + 1);
    match config.scenario {
        Scenario::A => generate_mixed_homogeneous(config, &mut rng, Family::Poisson),
        Scenario::ZibA => generate_mixed_homogeneous(config, &mut rng, Family::Binomial),
        _ => generate_regression(config, &mut rng),
    }
}

fn generate_mixed_homogeneous(
    config: &ScenarioConfig,
    rng: &mut ChaCha12Rng,
    family: Family,
) -> Result<Dataset> {
    let psi = config.psi.unwrap();
    let mu = config.mu.unwrap();
    let kappa = config.kappa.unwrap();
    let n = config.n;
    let mut records = Vec::with_capacity(n);
    match family {
        Family::Poisson => {
            // Rate ~ Gamma(shape kappa, scale mu/kappa): mean mu, variance
            // mu^2/kappa.
            let mix = Gamma::new(kappa, mu / kappa)
                .map_err(|e| Error::numerical(format!("rate mixture: {e}")))?;
            for i in 0..n {
                let y = if rng.gen_bool(psi) {
                    let rate: f64 = rng.sample(mix);
                    sample_poisson(rng, rate)?
                } else {
                    0
                };
                records.push(plain_record(i, y, 1));
            }
        }
        Family::Binomial => {
            // Detection ~ Beta with mean mu and precision kappa.
            let mix = Beta::new(mu * kappa, (1.0 - mu) * kappa)
                .map_err(|e| Error::numerical(format!("detection mixture: {e}")))?;
            let t = config.visits;
            for i in 0..n {
                let y = if rng.gen_bool(psi) {
                    let p: f64 = rng.sample(mix);
                    sample_binomial(rng, t, p)?
                } else {
                    0
                };
                records.push(plain_record(i, y, t));
            }
        }
    }
    Dataset::new(records, family, vec![], vec![])
}

fn plain_record(i: usize, y: u64, visits: u32) -> SiteRecord {
    SiteRecord {
        site_id: format!("s{i}"),
        y,
        visits,
        x: vec![1.0],
        z: vec![1.0],
    }
}

fn sample_poisson(rng: &mut ChaCha12Rng, rate: f64) -> Result<u64> {
    if rate <= 1e-300 {
        return Ok(0);
    }
    let d = Poisson::new(rate).map_err(|e| Error::numerical(format!("count draw: {e}")))?;
    let y: f64 = rng.sample(d);
    Ok(y as u64)
}

fn sample_binomial(rng: &mut ChaCha12Rng, t: u32, p: f64) -> Result<u64> {
    let d = Binomial::new(t as u64, p.clamp(0.0, 1.0))
        .map_err(|e| Error::numerical(format!("detection draw: {e}")))?;
    Ok(rng.sample(d))
}

fn draw_covariates(config: &ScenarioConfig, rng: &mut ChaCha12Rng) -> Vec<(f64, f64)> {
    let mut fixed_rng;
    let r: &mut ChaCha12Rng = match config.covariate_design {
        CovariateDesign::PerReplicate => rng,
        CovariateDesign::Fixed => {
            fixed_rng =
                ChaCha12Rng::seed_from_u64(config.covariate_seed.unwrap_or(config.seed));
            fixed_rng.set_stream(0);
            &mut fixed_rng
        }
    };
    let b_like = matches!(config.scenario, Scenario::B | Scenario::ZibB);
    (0..config.n)
        .map(|_| {
            if b_like {
                match config.covariate_case {
                    CovariateCase::I => (r.sample(StandardNormal), r.sample(StandardNormal)),
                    CovariateCase::Ii => (
                        if r.gen_bool(0.5) { 1.0 } else { 0.0 },
                        r.sample(StandardNormal),
                    ),
                }
            } else {
                // Scenario c: x1 normal, x2 Bernoulli(1/2).
                (
                    r.sample(StandardNormal),
                    if r.gen_bool(0.5) { 1.0 } else { 0.0 },
                )
            }
        })
        .collect()
}

fn generate_regression(config: &ScenarioConfig, rng: &mut ChaCha12Rng) -> Result<Dataset> {
    let theta = config.theta.as_deref().unwrap();
    let occurrence_varies = config.scenario.occurrence_varies();
    let family = config.family();
    let t = config.visits;
    let covariates = draw_covariates(config, rng);
    let mut records = Vec::with_capacity(config.n);
    for (i, &(x1, x2)) in covariates.iter().enumerate() {
        let psi = if occurrence_varies {
            let g = config.gamma.as_deref().unwrap();
            logistic(g[0] + g[1] * x1)
        } else {
            config.psi.unwrap()
        };
        let present = rng.gen_bool(psi);
        let eta = theta[0] + theta[1] * x1 + theta[2] * x2;
        let y = if !present {
            0
        } else {
            match family {
                Family::Poisson => sample_poisson(rng, eta.exp())?,
                Family::Binomial => sample_binomial(rng, t, logistic(eta))?,
            }
        };
        records.push(SiteRecord {
            site_id: format!("s{i}"),
            y,
            visits: if family == Family::Binomial { t } else { 1 },
            x: vec![1.0, x1, x2],
            z: if occurrence_varies {
                vec![1.0, x1, x2]
            } else {
                vec![1.0]
            },
        });
    }
    let covariate_names = vec!["x1".to_string(), "x2".to_string()];
    let z_names = if occurrence_varies {
        covariate_names.clone()
    } else {
        vec![]
    };
    Dataset::new(records, family, covariate_names, z_names)
}

/// Average presence probability realized by a generated dataset: the design
/// constant where presence is constant, otherwise the mean of the per-site
/// logistic probabilities implied by the stored covariates.
pub fn realized_psi_bar(config: &ScenarioConfig, dataset: &Dataset) -> f64 {
    if config.scenario.occurrence_varies() {
        let g = config.gamma.as_deref().expect("validated config");
        dataset
            .records()
            .iter()
            .map(|r| logistic(g[0] + g[1] * r.z[1]))
            .sum::<f64>()
            / dataset.n() as f64
    } else {
        config.psi.expect("validated config")
    }
}

/// One estimate from one fitter on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub replicate: usize,
    pub fitter: String,
    pub estimand: String,
    pub estimate: f64,
    pub se: f64,
    pub converged: bool,
    pub boundary: bool,
}

/// Summary metrics for one (fitter, estimand) pair.
///
/// `ave`, `sd`, `a_se`, `rmse` and `cp_pct` are computed over the `used`
/// replicates, i.e. those that converged off any boundary; `excluded` counts
/// the rest and `boundary_count` the boundary-flagged ones among them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub fitter: String,
    pub estimand: String,
    pub used: usize,
    pub excluded: usize,
    pub boundary_count: usize,
    /// Mean estimate.
    pub ave: f64,
    /// Sample standard deviation of the estimates.
    pub sd: f64,
    /// Mean of the reported standard errors.
    pub a_se: f64,
    /// Root mean squared error about the (per-replicate) truth.
    pub rmse: f64,
    /// Wald 95% coverage, in percent.
    pub cp_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryTable {
    pub replicates: usize,
    pub rows: Vec<SummaryRow>,
}

/// Per-replicate records together with their summary.
#[derive(Debug, Clone, Serialize)]
pub struct StudyOutput {
    pub records: Vec<RepRecord>,
    pub summary: SummaryTable,
}

fn presence_estimand(scenario: Scenario) -> &'static str {
    if scenario.occurrence_varies() {
        "psi_bar"
    } else {
        "psi"
    }
}

/// Estimand labels a fitter contributes, in emission order.
fn fitter_estimands(config: &ScenarioConfig, fc: &FitterConfig) -> Vec<String> {
    let mut v = Vec::new();
    if matches!(config.scenario, Scenario::B | Scenario::ZibB) {
        if let DetectionComponent::Regression(f) = &fc.detection {
            v.push("theta_0".to_string());
            for c in f.columns() {
                v.push(format!("theta_{c}"));
            }
        }
    }
    v.push(presence_estimand(config.scenario).to_string());
    v
}

fn fit_replicate(config: &ScenarioConfig, replicate: usize) -> Result<Vec<RepRecord>> {
    let dataset = generate(config, replicate)?;
    let family = config.family();
    let mut out = Vec::new();
    for fc in &config.fitters {
        let estimands = fitter_estimands(config, fc);
        let spec = ModelSpec {
            family,
            detection: fc.detection.clone(),
            occurrence: fc.occurrence.clone(),
            method: fc.method,
        };
        let record = |estimand: &str, estimate: f64, se: f64, converged: bool, boundary: bool| {
            RepRecord {
                replicate,
                fitter: fc.name.clone(),
                estimand: estimand.to_string(),
                estimate,
                se,
                converged,
                boundary,
            }
        };
        let failed = |out: &mut Vec<RepRecord>| {
            for e in &estimands {
                out.push(record(e, f64::NAN, f64::NAN, false, false));
            }
        };
        let fit = match model::fit(&dataset, &spec) {
            Ok(f) => f,
            Err(_) => {
                failed(&mut out);
                continue;
            }
        };
        // Detection coefficients (tracked for the regression scenarios).
        for e in &estimands[..estimands.len() - 1] {
            let j = fit
                .param_names
                .iter()
                .position(|n| n == e)
                .expect("estimand names follow the parameter naming");
            out.push(record(e, fit.params[j], fit.se[j], fit.converged, fit.is_boundary()));
        }
        let presence = estimands.last().unwrap();
        if fc.ht {
            match ht_psi_bar(&dataset, &fit, family) {
                Ok(ht) => out.push(record(
                    presence,
                    ht.psi_bar_hat,
                    ht.se,
                    fit.converged,
                    fit.is_boundary() || ht.boundary,
                )),
                Err(_) => out.push(record(presence, f64::NAN, f64::NAN, false, false)),
            }
        } else {
            match fit.psi_bar(&dataset) {
                Some((e, s)) => {
                    out.push(record(presence, e, s, fit.converged, fit.is_boundary()))
                }
                None => out.push(record(presence, f64::NAN, f64::NAN, false, false)),
            }
        }
    }
    Ok(out)
}

/// Run every fitter on every replicate and summarize.
///
/// Replicates execute in parallel under the ambient rayon pool; records are
/// assembled in replicate order, so the output does not depend on the worker
/// count.
pub fn run_study(config: &ScenarioConfig) -> Result<StudyOutput> {
    config.validate()?;
    let per_replicate: Vec<Vec<RepRecord>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| fit_replicate(config, r))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<RepRecord> = per_replicate.into_iter().flatten().collect();
    let summary = summarize(config, &records)?;
    Ok(StudyOutput { records, summary })
}

enum Truths {
    ByName(HashMap<String, f64>),
    PerReplicate(Vec<f64>),
}

impl Truths {
    fn lookup(&self, rec: &RepRecord) -> Option<f64> {
        match self {
            Truths::ByName(m) => m.get(&rec.estimand).copied(),
            Truths::PerReplicate(v) => v.get(rec.replicate).copied(),
        }
    }
}

fn truth_table(config: &ScenarioConfig) -> Result<Truths> {
    if config.scenario.occurrence_varies() {
        // The presence estimand is the realized average of the per-site
        // probabilities, which moves with the covariate draw.
        let mut v = Vec::with_capacity(config.replicates);
        for r in 0..config.replicates {
            let ds = generate(config, r)?;
            v.push(realized_psi_bar(config, &ds));
        }
        Ok(Truths::PerReplicate(v))
    } else {
        let mut m = HashMap::new();
        if let Some(psi) = config.psi {
            m.insert("psi".to_string(), psi);
        }
        if let Some(theta) = config.theta.as_deref() {
            m.insert("theta_0".to_string(), theta[0]);
            m.insert("theta_x1".to_string(), theta[1]);
            m.insert("theta_x2".to_string(), theta[2]);
        }
        Ok(Truths::ByName(m))
    }
}

/// Compute the summary metrics from per-replicate records.
///
/// Groups records by (fitter, estimand) in first-appearance order. A record
/// enters the metrics only if it converged off any boundary; groups with no
/// usable record are an error. Coverage intervals are Wald on the natural
/// scale, or on the logit scale for presence estimands when the config asks
/// for it.
pub fn summarize(config: &ScenarioConfig, records: &[RepRecord]) -> Result<SummaryTable> {
    let truths = truth_table(config)?;
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<&RepRecord>> = HashMap::new();
    for rec in records {
        let key = (rec.fitter.clone(), rec.estimand.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(rec);
    }
    let mut rows = Vec::with_capacity(order.len());
    for key in &order {
        let group = &groups[key];
        let included: Vec<&&RepRecord> = group
            .iter()
            .filter(|r| r.converged && !r.boundary)
            .collect();
        let used = included.len();
        if used == 0 {
            return Err(Error::numerical(format!(
                "fitter '{}' produced no usable replicates for '{}'",
                key.0, key.1
            )));
        }
        let excluded = group.len() - used;
        let boundary_count = group.iter().filter(|r| r.boundary).count();
        let ave = included.iter().map(|r| r.estimate).sum::<f64>() / used as f64;
        let sd = if used > 1 {
            (included
                .iter()
                .map(|r| (r.estimate - ave).powi(2))
                .sum::<f64>()
                / (used - 1) as f64)
                .sqrt()
        } else {
            f64::NAN
        };
        let a_se = included.iter().map(|r| r.se).sum::<f64>() / used as f64;
        let presence_like = key.1 == "psi" || key.1 == "psi_bar";
        let mut sq_err = 0.0;
        let mut covered = 0usize;
        let mut with_truth = 0usize;
        for r in &included {
            let Some(t) = truths.lookup(r) else { continue };
            with_truth += 1;
            sq_err += (r.estimate - t).powi(2);
            let hit = if config.logit_scale_ci
                && presence_like
                && r.estimate > 0.0
                && r.estimate < 1.0
                && t > 0.0
                && t < 1.0
            {
                let spread = WALD_Z * r.se / (r.estimate * (1.0 - r.estimate));
                (logit(r.estimate) - logit(t)).abs() <= spread
            } else {
                (r.estimate - t).abs() <= WALD_Z * r.se
            };
            if hit {
                covered += 1;
            }
        }
        let (rmse, cp_pct) = if with_truth > 0 {
            (
                (sq_err / with_truth as f64).sqrt(),
                100.0 * covered as f64 / with_truth as f64,
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        rows.push(SummaryRow {
            fitter: key.0.clone(),
            estimand: key.1.clone(),
            used,
            excluded,
            boundary_count,
            ave,
            sd,
            a_se,
            rmse,
            cp_pct,
        });
    }
    Ok(SummaryTable {
        replicates: config.replicates,
        rows,
    })
}

/// A point on the heterogeneity-bias curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasCurveRow {
    pub kappa: f64,
    pub log10_kappa: f64,
    /// Monte Carlo relative bias of the constant-rate presence estimate, in
    /// percent.
    pub empirical_bias_pct: f64,
    /// Closed-form limit `100 (rho - 1)` with mixing variance `mu^2 / kappa`.
    pub asymptotic_bias_pct: f64,
}

/// Log-spaced grid of `points` values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0) || !(hi >= lo) {
        return Err(Error::config("grid needs 0 < lo <= hi"));
    }
    if points == 0 {
        return Err(Error::config("grid needs at least one point"));
    }
    if points == 1 {
        if hi > lo {
            return Err(Error::config("a one-point grid needs lo = hi"));
        }
        return Ok(vec![lo]);
    }
    let (llo, lhi) = (lo.log10(), hi.log10());
    let step = (lhi - llo) / (points - 1) as f64;
    Ok((0..points)
        .map(|i| 10f64.powf(llo + step * i as f64))
        .collect())
}

/// Empirical versus closed-form relative bias (percent) of the constant-rate
/// presence estimator across a dispersion grid.
///
/// Each grid point runs `replicates` draws of the mixed homogeneous count
/// design and fits the constant-rate model by conditional likelihood (the
/// full-likelihood fit coincides for this model). All grid points share the
/// seed, so neighbouring points see common random numbers.
pub fn bias_curve(
    mu: f64,
    psi: f64,
    n: usize,
    kappas: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<Vec<BiasCurveRow>> {
    if kappas.is_empty() {
        return Err(Error::config("empty dispersion grid"));
    }
    if replicates == 0 {
        return Err(Error::config("at least one replicate is required"));
    }
    kappas
        .par_iter()
        .map(|&kappa| {
            let config = ScenarioConfig {
                scenario: Scenario::A,
                n,
                replicates,
                seed,
                visits: 1,
                psi: Some(psi),
                mu: Some(mu),
                kappa: Some(kappa),
                theta: None,
                gamma: None,
                covariate_case: CovariateCase::I,
                covariate_design: CovariateDesign::PerReplicate,
                covariate_seed: None,
                logit_scale_ci: false,
                fitters: vec![],
            };
            let mut sum = 0.0;
            let mut used = 0usize;
            for r in 0..replicates {
                let ds = generate(&config, r)?;
                let freq = aggregate(&ds);
                if let Ok(fit) = zip::fit_zip_homogeneous(&freq, Method::Cl) {
                    if fit.converged && !fit.is_boundary() {
                        sum += fit.psi_hat.expect("constant fit");
                        used += 1;
                    }
                }
            }
            if used == 0 {
                return Err(Error::numerical(format!(
                    "no usable replicates at kappa = {kappa}"
                )));
            }
            let empirical = 100.0 * (sum / used as f64 - psi) / psi;
            let asymptotic = 100.0 * bias_rho(mu, mu * mu / kappa)?.relative_bias;
            Ok(BiasCurveRow {
                kappa,
                log10_kappa: kappa.log10(),
                empirical_bias_pct: empirical,
                asymptotic_bias_pct: asymptotic,
            })
        })
        .collect()
}

/// Write per-replicate records as CSV with a header row.
pub fn write_records_csv<W: std::io::Write>(w: W, records: &[RepRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read records written by [`write_records_csv`].
pub fn read_records_csv<R: std::io::Read>(r: R) -> Result<Vec<RepRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Write the summary table as CSV with a header row.
pub fn write_summary_csv<W: std::io::Write>(w: W, table: &SummaryTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in &table.rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write bias-curve rows as CSV with a header row.
pub fn write_curve_csv<W: std::io::Write>(w: W, rows: &[BiasCurveRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Formula;

    fn base_config(scenario: Scenario) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            n: 50,
            replicates: 2,
            seed: 7,
            visits: 5,
            psi: Some(0.6),
            mu: Some(1.0),
            kappa: Some(2.0),
            theta: Some(vec![1.0, -1.0, 1.0]),
            gamma: Some(vec![1.0, 1.0]),
            covariate_case: CovariateCase::I,
            covariate_design: CovariateDesign::PerReplicate,
            covariate_seed: None,
            logit_scale_ci: false,
            fitters: vec![],
        }
    }

    fn regression_fitter(name: &str, method: Method) -> FitterConfig {
        FitterConfig {
            name: name.to_string(),
            method,
            detection: DetectionComponent::Regression(
                Formula::parse("1 + x1 + x2").unwrap(),
            ),
            occurrence: OccurrenceComponent::Constant,
            ht: false,
        }
    }

    #[test]
    fn toml_config_round_trips() {
        let text = r#"
            scenario = "c"
            n = 200
            replicates = 10
            seed = 42
            theta = [1.0, 1.0, 1.0]
            gamma = [1.0, 1.0]
            covariate_design = "fixed"
            covariate_seed = 99

            [[fitters]]
            name = "cl-star"
            method = "cl"
            detection = { kind = "regression", formula = "1 + x1 + x2" }
            occurrence = { kind = "constant" }
            ht = true
        "#;
        let config: ScenarioConfig = toml::from_str(text).unwrap();
        config.validate().unwrap();
        assert_eq!(config.scenario, Scenario::C);
        assert_eq!(config.covariate_design, CovariateDesign::Fixed);
        assert_eq!(config.covariate_seed, Some(99));
        assert!(config.fitters[0].ht);
        let back: ScenarioConfig =
            toml::from_str(&toml::to_string(&config).unwrap()).unwrap();
        assert_eq!(back.fitters[0].name, "cl-star");
        assert_eq!(back.theta, config.theta);
    }

    #[test]
    fn generation_is_deterministic_and_streams_differ() {
        let config = base_config(Scenario::B);
        let a1 = generate(&config, 3).unwrap();
        let a2 = generate(&config, 3).unwrap();
        assert_eq!(
            a1.records().iter().map(|r| r.y).collect::<Vec<_>>(),
            a2.records().iter().map(|r| r.y).collect::<Vec<_>>()
        );
        assert_eq!(a1.records()[0].x, a2.records()[0].x);
        let b = generate(&config, 4).unwrap();
        assert_ne!(
            a1.records().iter().map(|r| r.y).collect::<Vec<_>>(),
            b.records().iter().map(|r| r.y).collect::<Vec<_>>()
        );
    }

    #[test]
    fn fixed_design_shares_covariates_across_replicates() {
        let mut config = base_config(Scenario::C);
        config.covariate_design = CovariateDesign::Fixed;
        let d0 = generate(&config, 0).unwrap();
        let d1 = generate(&config, 1).unwrap();
        for (r0, r1) in d0.records().iter().zip(d1.records()) {
            assert_eq!(r0.x, r1.x);
        }
        assert_ne!(
            d0.records().iter().map(|r| r.y).collect::<Vec<_>>(),
            d1.records().iter().map(|r| r.y).collect::<Vec<_>>()
        );
        assert_eq!(
            realized_psi_bar(&config, &d0),
            realized_psi_bar(&config, &d1)
        );
    }

    #[test]
    fn large_dispersion_matches_homogeneous_cells() {
        // kappa = 1e8 makes the mixed counts indistinguishable from the
        // homogeneous design; chi-square against the zero-inflated Poisson
        // cells at n = 1e5 (cells 0..=3 and 4+, critical value 18.47 at the
        // 0.001 level on 4 degrees of freedom).
        let mut config = base_config(Scenario::A);
        config.n = 100_000;
        config.psi = Some(0.5);
        config.mu = Some(1.0);
        config.kappa = Some(1e8);
        let ds = generate(&config, 0).unwrap();
        let mut observed = [0.0f64; 5];
        for r in ds.records() {
            observed[(r.y as usize).min(4)] += 1.0;
        }
        let e = (-1.0f64).exp();
        let mut cells = [
            0.5 + 0.5 * e,
            0.5 * e,
            0.25 * e,
            e / 12.0,
            0.0,
        ];
        cells[4] = 1.0 - cells[..4].iter().sum::<f64>();
        let n = config.n as f64;
        let chi2: f64 = observed
            .iter()
            .zip(&cells)
            .map(|(o, p)| (o - n * p).powi(2) / (n * p))
            .sum();
        assert!(chi2 < 18.47, "chi-square {chi2}");
    }

    #[test]
    fn count_regression_mean_matches_lognormal_moment() {
        // E[y] = psi E[exp(theta'x)] = psi exp(1) exp(1/2) exp(1/2) for
        // theta = (1, -1, 1) with standard normal covariates.
        let mut config = base_config(Scenario::B);
        config.n = 100_000;
        config.psi = Some(0.75);
        let ds = generate(&config, 0).unwrap();
        let mean = ds.records().iter().map(|r| r.y as f64).sum::<f64>() / config.n as f64;
        let expected = 0.75 * (2.0f64).exp();
        assert!(
            (mean - expected).abs() < 0.3,
            "mean {mean} vs {expected}"
        );
    }

    #[test]
    fn realized_presence_approaches_population_mean() {
        // E[logistic(1 + x)] over x ~ N(0,1) is about 0.6967.
        let mut config = base_config(Scenario::C);
        config.n = 200_000;
        let ds = generate(&config, 0).unwrap();
        let bar = realized_psi_bar(&config, &ds);
        assert!((bar - 0.6967).abs() < 0.002, "realized mean {bar}");
    }

    #[test]
    fn study_smoke_and_summary_recompute() {
        let mut config = base_config(Scenario::B);
        config.n = 80;
        config.replicates = 4;
        config.psi = Some(0.75);
        config.fitters = vec![
            regression_fitter("cl-full", Method::Cl),
            regression_fitter("ml-full", Method::Ml),
        ];
        let out = run_study(&config).unwrap();
        // 4 estimands per fitter: three coefficients and the presence
        // probability, in emission order.
        assert_eq!(out.records.len(), 4 * 2 * 4);
        assert_eq!(out.records[0].fitter, "cl-full");
        assert_eq!(out.records[0].estimand, "theta_0");
        assert_eq!(out.records[3].estimand, "psi");
        let recomputed = summarize(&config, &out.records).unwrap();
        assert_eq!(
            serde_json::to_string(&recomputed).unwrap(),
            serde_json::to_string(&out.summary).unwrap()
        );
        let psi_row = out
            .summary
            .rows
            .iter()
            .find(|r| r.fitter == "ml-full" && r.estimand == "psi")
            .unwrap();
        assert!(psi_row.used + psi_row.excluded == 4);
        assert!(psi_row.ave > 0.0 && psi_row.ave < 1.0);
        // Constant truth, so the error decomposition ties the metrics
        // together.
        if psi_row.used == 4 && psi_row.excluded == 0 {
            let bias = psi_row.ave - 0.75;
            let r = psi_row.used as f64;
            let lhs = psi_row.rmse.powi(2);
            let rhs = bias.powi(2) + psi_row.sd.powi(2) * (r - 1.0) / r;
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn study_is_reproducible() {
        let mut config = base_config(Scenario::B);
        config.n = 60;
        config.replicates = 3;
        config.fitters = vec![regression_fitter("cl", Method::Cl)];
        let a = run_study(&config).unwrap();
        let b = run_study(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&a.records).unwrap(),
            serde_json::to_string(&b.records).unwrap()
        );
    }

    #[test]
    fn rejects_single_replicate_and_bad_fitters() {
        let mut config = base_config(Scenario::B);
        config.replicates = 1;
        config.fitters = vec![regression_fitter("cl", Method::Cl)];
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("SD undefined"), "{err}");

        let mut config = base_config(Scenario::B);
        config.fitters = vec![
            regression_fitter("same", Method::Cl),
            regression_fitter("same", Method::Ml),
        ];
        assert!(config.validate().is_err());

        let mut config = base_config(Scenario::B);
        let mut ht = regression_fitter("ht", Method::Ml);
        ht.ht = true;
        config.fitters = vec![ht];
        assert!(config.validate().is_err());

        let mut config = base_config(Scenario::B);
        let mut occ = regression_fitter("occ", Method::Cl);
        occ.occurrence =
            OccurrenceComponent::Regression(Formula::parse("1 + x1").unwrap());
        config.fitters = vec![occ];
        assert!(config.validate().is_err());

        let mut config = base_config(Scenario::A);
        config.psi = None;
        assert!(config.validate_design().is_err());
    }

    #[test]
    fn curve_grid_and_near_homogeneous_point() {
        let grid = log_grid(0.01, 1000.0, 6).unwrap();
        assert_eq!(grid.len(), 6);
        assert!((grid[0] - 0.01).abs() < 1e-12);
        assert!((grid[5] - 1000.0).abs() < 1e-9);
        assert!((grid[1] / grid[0] - grid[2] / grid[1]).abs() < 1e-9);
        assert!(log_grid(1.0, 0.5, 3).is_err());
        assert_eq!(log_grid(2.0, 2.0, 1).unwrap(), vec![2.0]);

        let rows = bias_curve(1.0, 0.5, 400, &[1e8], 3, 11).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].asymptotic_bias_pct.abs() < 1e-4);
        assert!(rows[0].empirical_bias_pct.abs() < 15.0);
        assert!((rows[0].log10_kappa - 8.0).abs() < 1e-12);
    }

    #[test]
    fn records_csv_round_trips() {
        let records = vec![
            RepRecord {
                replicate: 0,
                fitter: "cl".into(),
                estimand: "psi".into(),
                estimate: 0.512345678901234,
                se: 0.04,
                converged: true,
                boundary: false,
            },
            RepRecord {
                replicate: 1,
                fitter: "cl".into(),
                estimand: "psi".into(),
                estimate: f64::NAN,
                se: f64::NAN,
                converged: false,
                boundary: false,
            },
        ];
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &records).unwrap();
        let back = read_records_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], records[0]);
        assert!(back[1].estimate.is_nan() && !back[1].converged);
    }
}
