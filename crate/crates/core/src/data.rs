//! Site-level datasets, sufficient statistics, and CSV ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation family: total counts (Poisson) or detections out of a fixed
/// number of visits (binomial).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Poisson,
    Binomial,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Poisson => write!(f, "poisson"),
            Family::Binomial => write!(f, "binomial"),
        }
    }
}

/// One site: total detections `y` over `visits` occasions plus detection
/// covariates `x` and occurrence covariates `z` (both intercept-first).
#[derive(Debug, Clone, PartialEq)]
pub struct SiteRecord {
    pub site_id: String,
    pub y: u64,
    pub visits: u32,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// A validated collection of site records with a common visit count.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<SiteRecord>,
    family: Family,
    /// Names of the detection covariates `x[1..]` (the intercept is unnamed).
    x_names: Vec<String>,
    /// Names of the occurrence covariates `z[1..]`.
    z_names: Vec<String>,
    visits: u32,
}

impl Dataset {
    /// Validate and assemble a dataset.
    pub fn new(
        records: Vec<SiteRecord>,
        family: Family,
        x_names: Vec<String>,
        z_names: Vec<String>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::data("dataset has no records"));
        }
        let visits = records[0].visits;
        let xdim = x_names.len() + 1;
        let zdim = z_names.len() + 1;
        for r in &records {
            if r.visits != visits {
                return Err(Error::data(format!(
                    "site {}: visit count {} differs from {} (a common visit count is required)",
                    r.site_id, r.visits, visits
                )));
            }
            if r.visits == 0 {
                return Err(Error::data(format!("site {}: zero visits", r.site_id)));
            }
            if family == Family::Binomial && r.y > u64::from(r.visits) {
                return Err(Error::data(format!(
                    "site {}: y = {} exceeds the {} visits",
                    r.site_id, r.y, r.visits
                )));
            }
            if r.x.len() != xdim || r.z.len() != zdim {
                return Err(Error::data(format!(
                    "site {}: covariate vector length mismatch",
                    r.site_id
                )));
            }
            if r.x[0] != 1.0 || r.z[0] != 1.0 {
                return Err(Error::data(format!(
                    "site {}: covariate vectors must start with the intercept 1",
                    r.site_id
                )));
            }
            if r.x.iter().chain(r.z.iter()).any(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "site {}: non-finite covariate",
                    r.site_id
                )));
            }
        }
        Ok(Dataset {
            records,
            family,
            x_names,
            z_names,
            visits,
        })
    }

    pub fn records(&self) -> &[SiteRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn visits(&self) -> u32 {
        self.visits
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    /// Number of sites with at least one detection.
    pub fn m_plus(&self) -> usize {
        self.records.iter().filter(|r| r.y > 0).count()
    }

    /// True when every x and every z vector is the bare intercept.
    pub fn intercept_only(&self) -> bool {
        self.x_names.is_empty() && self.z_names.is_empty()
    }
}

/// Frequency table of total counts: `m_k` sites observed with total `k`.
/// Sufficient statistic for all covariate-free models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrequencyTable {
    counts: BTreeMap<u64, u64>,
    n: u64,
    m_plus: u64,
}

impl FrequencyTable {
    /// Build from a `k -> m_k` map; zero-count cells may be omitted.
    pub fn from_counts(counts: BTreeMap<u64, u64>) -> Result<Self> {
        let n: u64 = counts.values().sum();
        if n == 0 {
            return Err(Error::data("frequency table is empty"));
        }
        let m_plus = n - counts.get(&0).copied().unwrap_or(0);
        Ok(FrequencyTable { counts, n, m_plus })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn m_plus(&self) -> u64 {
        self.m_plus
    }

    pub fn count(&self, k: u64) -> u64 {
        self.counts.get(&k).copied().unwrap_or(0)
    }

    /// Iterator over `(k, m_k)` cells with `m_k > 0`, ascending in `k`.
    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&k, &m)| (k, m)).filter(|&(_, m)| m > 0)
    }

    pub fn max_count(&self) -> u64 {
        self.counts
            .iter()
            .rev()
            .find(|&(_, &m)| m > 0)
            .map(|(&k, _)| k)
            .unwrap_or(0)
    }

    /// Total detections over all sites, `sum_k k * m_k`.
    pub fn total_detections(&self) -> u64 {
        self.iter().map(|(k, m)| k * m).sum()
    }

    /// Mean count among sites with at least one detection.
    pub fn mean_positive(&self) -> f64 {
        self.total_detections() as f64 / self.m_plus as f64
    }
}

/// Collapse a dataset to its count frequency table.
pub fn aggregate(dataset: &Dataset) -> FrequencyTable {
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for r in dataset.records() {
        *counts.entry(r.y).or_insert(0) += 1;
    }
    FrequencyTable::from_counts(counts).expect("non-empty dataset aggregates cleanly")
}

/// Column mapping for CSV ingestion.
///
/// Either `y` (a presummed total column) or `visit_columns` (per-visit counts
/// that are summed) must be given. Covariate columns are listed by name; an
/// intercept is prepended automatically.
#[derive(Debug, Clone, Default)]
pub struct ColumnSchema {
    pub site_id: Option<String>,
    pub y: Option<String>,
    pub visit_columns: Vec<String>,
    pub detection_columns: Vec<String>,
    pub occurrence_columns: Vec<String>,
    /// Visit count when `y` is presummed; per-visit ingestion infers it.
    pub visits: Option<u32>,
}

/// Read and validate a CSV file (comma-separated, header row required).
pub fn load_dataset(path: &Path, schema: &ColumnSchema, family: Family) -> Result<Dataset> {
    if schema.y.is_some() == !schema.visit_columns.is_empty() {
        return Err(Error::config(
            "exactly one of a y column or per-visit columns must be specified",
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("column '{name}' not found in header")))
    };

    let id_idx = schema.site_id.as_deref().map(col).transpose()?;
    let y_idx = schema.y.as_deref().map(col).transpose()?;
    let visit_idx: Vec<usize> = schema
        .visit_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let det_idx: Vec<usize> = schema
        .detection_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let occ_idx: Vec<usize> = schema
        .occurrence_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;

    let visits = if !visit_idx.is_empty() {
        u32::try_from(visit_idx.len()).expect("visit column count fits u32")
    } else {
        match (family, schema.visits) {
            (_, Some(t)) => t,
            (Family::Poisson, None) => 1,
            (Family::Binomial, None) => {
                return Err(Error::config(
                    "binomial data with a presummed y column requires the visit count",
                ))
            }
        }
    };

    let parse_count = |field: &str, what: &str, row: usize| -> Result<u64> {
        field.parse::<u64>().map_err(|_| {
            Error::data(format!(
                "row {row}: {what} value '{field}' is not a nonnegative integer"
            ))
        })
    };
    let parse_covariate = |field: &str, name: &str, row: usize| -> Result<f64> {
        if field.is_empty() {
            return Err(Error::data(format!("row {row}: missing covariate '{name}'")));
        }
        let v: f64 = field
            .parse()
            .map_err(|_| Error::data(format!("row {row}: non-numeric cell '{field}' in '{name}'")))?;
        if !v.is_finite() {
            return Err(Error::data(format!(
                "row {row}: non-finite covariate '{name}'"
            )));
        }
        Ok(v)
    };

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2; // after the header, 1-based for messages
        let y = if let Some(idx) = y_idx {
            parse_count(&rec[idx], "count", row)?
        } else {
            let mut total = 0u64;
            for (&idx, name) in visit_idx.iter().zip(&schema.visit_columns) {
                let v = parse_count(&rec[idx], name, row)?;
                if family == Family::Binomial && v > 1 {
                    return Err(Error::data(format!(
                        "row {row}: per-visit detection '{name}' must be 0 or 1 for binomial data"
                    )));
                }
                total += v;
            }
            total
        };
        let mut x = Vec::with_capacity(det_idx.len() + 1);
        x.push(1.0);
        for (&idx, name) in det_idx.iter().zip(&schema.detection_columns) {
            x.push(parse_covariate(&rec[idx], name, row)?);
        }
        let mut z = Vec::with_capacity(occ_idx.len() + 1);
        z.push(1.0);
        for (&idx, name) in occ_idx.iter().zip(&schema.occurrence_columns) {
            z.push(parse_covariate(&rec[idx], name, row)?);
        }
        let site_id = match id_idx {
            Some(idx) => rec[idx].to_string(),
            None => format!("{}", i + 1),
        };
        records.push(SiteRecord {
            site_id,
            y,
            visits,
            x,
            z,
        });
    }
    Dataset::new(
        records,
        family,
        schema.detection_columns.clone(),
        schema.occurrence_columns.clone(),
    )
}
