//! Model specification and the fit dispatcher.

use serde::{Deserialize, Serialize};

use crate::data::{aggregate, Dataset, Family};
use crate::error::{Error, Result};
use crate::fit::{FitResult, Method};
use crate::zip::{self, MixtureKind};
use crate::zib;

/// A linear-predictor formula: `1` (intercept only) or `1 + col1 + col2`.
/// No interactions or transforms; pre-compute columns instead.
///
/// Serializes as its display string, so configs and command-line flags share
/// one grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    columns: Vec<String>,
}

impl Serialize for Formula {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Formula {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Formula::parse(&text).map_err(serde::de::Error::custom)
    }
}

impl Formula {
    /// Intercept-only formula.
    pub fn intercept() -> Self {
        Formula { columns: vec![] }
    }

    pub fn from_columns(columns: Vec<String>) -> Self {
        Formula { columns }
    }

    /// Parse `"1"` or `"1 + col1 + col2"`.
    pub fn parse(text: &str) -> Result<Self> {
        let terms: Vec<&str> = text.split('+').map(str::trim).collect();
        if terms.is_empty() || terms[0] != "1" {
            return Err(Error::config(format!(
                "formula '{text}' must start with the intercept term '1'"
            )));
        }
        let mut columns = Vec::new();
        for t in &terms[1..] {
            if t.is_empty() {
                return Err(Error::config(format!("formula '{text}' has an empty term")));
            }
            if *t == "1" || columns.iter().any(|c| c == t) {
                return Err(Error::config(format!(
                    "formula '{text}' repeats the term '{t}'"
                )));
            }
            columns.push((*t).to_string());
        }
        Ok(Formula { columns })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn intercept_only(&self) -> bool {
        self.columns.is_empty()
    }

    /// Design dimension including the intercept.
    pub fn dim(&self) -> usize {
        self.columns.len() + 1
    }
}

impl std::fmt::Display for Formula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "1")?;
        for c in &self.columns {
            write!(f, " + {c}")?;
        }
        Ok(())
    }
}

/// Which covariate pool a formula draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateSide {
    Detection,
    Occurrence,
}

/// Build intercept-first design rows for a formula over a dataset.
pub fn design_rows(
    dataset: &Dataset,
    formula: &Formula,
    side: CovariateSide,
) -> Result<Vec<Vec<f64>>> {
    let names = match side {
        CovariateSide::Detection => dataset.x_names(),
        CovariateSide::Occurrence => dataset.z_names(),
    };
    let mut idx = Vec::with_capacity(formula.columns.len());
    for c in &formula.columns {
        let j = names.iter().position(|n| n == c).ok_or_else(|| {
            Error::model(format!(
                "formula column '{c}' not present among the loaded {} covariates",
                match side {
                    CovariateSide::Detection => "detection",
                    CovariateSide::Occurrence => "occurrence",
                }
            ))
        })?;
        idx.push(j + 1); // covariate vectors are intercept-first
    }
    let rows = dataset
        .records()
        .iter()
        .map(|r| {
            let v = match side {
                CovariateSide::Detection => &r.x,
                CovariateSide::Occurrence => &r.z,
            };
            let mut row = Vec::with_capacity(idx.len() + 1);
            row.push(1.0);
            for &j in &idx {
                row.push(v[j]);
            }
            row
        })
        .collect();
    Ok(rows)
}

/// Full-column-rank check via the rank of the Gram matrix.
pub(crate) fn full_rank(rows: &[Vec<f64>]) -> bool {
    if rows.is_empty() {
        return false;
    }
    let p = rows[0].len();
    if rows.len() < p {
        return false;
    }
    let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
    for row in rows {
        for i in 0..p {
            for j in 0..p {
                gram[(i, j)] += row[i] * row[j];
            }
        }
    }
    let scale = gram.diagonal().max();
    if scale <= 0.0 {
        return false;
    }
    gram.rank(1e-10 * scale) == p
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logit with the usual open-interval domain.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Detection component of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "formula")]
pub enum DetectionComponent {
    /// Single shared rate or detection probability.
    Constant,
    /// Gamma-mixed Poisson rate (negative binomial marginal); Poisson family.
    GammaMixture,
    /// Finite Poisson mixture with the given component count.
    FiniteMixture(usize),
    /// Beta-mixed detection probability (beta-binomial); binomial family.
    BetaMixture,
    /// Log-linear (Poisson) or logistic (binomial) regression.
    Regression(Formula),
}

/// Occurrence component of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "formula")]
pub enum OccurrenceComponent {
    Constant,
    /// Logistic regression for the presence probability.
    Regression(Formula),
}

/// Complete model specification for the dispatcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub detection: DetectionComponent,
    pub occurrence: OccurrenceComponent,
    pub method: Method,
}

/// Fit a model specification to a dataset.
///
/// Covariate-free specifications go through the frequency-table fitters;
/// anything with a regression component goes through the regression fitters.
/// Mixture detection cannot be combined with occurrence regression (the
/// marginal count frequencies no longer identify the site-level mixture).
pub fn fit(dataset: &Dataset, spec: &ModelSpec) -> Result<FitResult> {
    if spec.family != dataset.family() {
        return Err(Error::model(format!(
            "model family {} does not match dataset family {}",
            spec.family,
            dataset.family()
        )));
    }
    match (&spec.detection, &spec.occurrence) {
        (DetectionComponent::Constant, OccurrenceComponent::Constant) => {
            let freq = aggregate(dataset);
            match spec.family {
                Family::Poisson => zip::fit_zip_homogeneous(&freq, spec.method),
                Family::Binomial => {
                    zib::fit_zib_homogeneous(&freq, dataset.visits().into(), spec.method)
                }
            }
        }
        (DetectionComponent::GammaMixture, OccurrenceComponent::Constant) => {
            require_family(spec, Family::Poisson)?;
            zip::fit_zip_mixture(&aggregate(dataset), MixtureKind::Gamma, spec.method)
        }
        (DetectionComponent::FiniteMixture(c), OccurrenceComponent::Constant) => {
            require_family(spec, Family::Poisson)?;
            zip::fit_zip_mixture(&aggregate(dataset), MixtureKind::Finite(*c), spec.method)
        }
        (DetectionComponent::BetaMixture, OccurrenceComponent::Constant) => {
            require_family(spec, Family::Binomial)?;
            zib::fit_zib_mixture(&aggregate(dataset), dataset.visits().into(), spec.method)
        }
        (DetectionComponent::Regression(f), occ) => {
            let occ_formula = match occ {
                OccurrenceComponent::Constant => Formula::intercept(),
                OccurrenceComponent::Regression(g) => g.clone(),
            };
            match spec.family {
                Family::Poisson => zip::fit_zip_regression(dataset, f, &occ_formula, spec.method),
                Family::Binomial => zib::fit_zib_regression(dataset, f, &occ_formula, spec.method),
            }
        }
        (DetectionComponent::Constant, OccurrenceComponent::Regression(g)) => {
            let det = Formula::intercept();
            match spec.family {
                Family::Poisson => zip::fit_zip_regression(dataset, &det, g, spec.method),
                Family::Binomial => zib::fit_zib_regression(dataset, &det, g, spec.method),
            }
        }
        (_, OccurrenceComponent::Regression(_)) => Err(Error::model(
            "mixture detection cannot be combined with an occurrence regression",
        )),
    }
}

fn require_family(spec: &ModelSpec, family: Family) -> Result<()> {
    if spec.family != family {
        return Err(Error::model(format!(
            "detection component {:?} requires the {} family",
            spec.detection, family
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_intercept_only() {
        let f = Formula::parse("1").unwrap();
        assert!(f.intercept_only());
        assert_eq!(f.dim(), 1);
    }

    #[test]
    fn parses_two_columns() {
        let f = Formula::parse("1 + x1 + x2").unwrap();
        assert_eq!(f.columns(), &["x1".to_string(), "x2".to_string()]);
        assert_eq!(f.to_string(), "1 + x1 + x2");
    }

    #[test]
    fn rejects_missing_intercept() {
        assert!(Formula::parse("x1 + x2").is_err());
    }

    #[test]
    fn rejects_duplicate_terms() {
        assert!(Formula::parse("1 + x1 + x1").is_err());
    }

    #[test]
    fn logistic_is_stable_in_the_tails() {
        assert!(logistic(800.0) <= 1.0);
        assert!(logistic(-800.0) >= 0.0);
        assert!((logistic(0.0) - 0.5).abs() < 1e-15);
        assert!((logistic(3.0) + logistic(-3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_rank_detects_duplicate_column() {
        let good = vec![vec![1.0, 0.5], vec![1.0, -0.3], vec![1.0, 2.0]];
        assert!(full_rank(&good));
        let bad = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]];
        assert!(!full_rank(&bad));
    }
}
