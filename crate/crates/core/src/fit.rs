//! Shared fit-result representation and its JSON document shape.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Family};

/// Estimation method: full maximum likelihood or the two-stage conditional
/// likelihood (detection stage on detected sites, presence stage after).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ml,
    Cl,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Ml => write!(f, "ml"),
            Method::Cl => write!(f, "cl"),
        }
    }
}

/// A fitted model.
///
/// Parameters live on the unconstrained working scale (log rates, logit
/// probabilities, coefficients as-is) in the order: detection parameters
/// first (`detection_dim` of them), then the presence parameters. `vcov` is
/// row-major on the same scale; `se` is the square root of its diagonal.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub family: Family,
    pub method: Method,
    /// Short model label, e.g. "zip-homogeneous".
    pub model: String,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    pub se: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    /// Number of leading entries of `params` that belong to the detection
    /// component.
    pub detection_dim: usize,
    /// Natural-scale detection parameters (rate, mean/dispersion, or the
    /// regression coefficients unchanged).
    pub theta_hat: Vec<f64>,
    /// Constant presence probability, when the model has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi_hat: Option<f64>,
    /// Natural-scale standard error of `psi_hat` (delta method).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi_se: Option<f64>,
    /// Occurrence regression coefficients, when the model has them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_hat: Option<Vec<f64>>,
    /// Covariate names used by the detection regression (intercept omitted).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_columns: Option<Vec<String>>,
    /// Covariate names used by the occurrence regression (intercept omitted).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occurrence_columns: Option<Vec<String>>,
    /// Maximized objective: the full log-likelihood for ML fits, the
    /// detection-stage conditional log-likelihood for CL fits.
    pub loglik: f64,
    pub aic: f64,
    pub converged: bool,
    /// Boundary flags, e.g. a presence estimate at 1 or a dispersion at the
    /// effectively-homogeneous cap.
    pub boundary: Vec<String>,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Fitted cell probabilities for count-frequency models.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell_probs: Option<Vec<f64>>,
    pub n: usize,
    pub m_plus: usize,
}

impl FitResult {
    /// Working-scale covariance as a matrix.
    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let p = self.params.len();
        let mut m = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                m[(i, j)] = self.vcov[i][j];
            }
        }
        m
    }

    /// Covariance of the detection parameters (leading block).
    pub fn detection_vcov(&self) -> DMatrix<f64> {
        let d = self.detection_dim;
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = self.vcov[i][j];
            }
        }
        m
    }

    pub fn is_boundary(&self) -> bool {
        !self.boundary.is_empty()
    }

    /// Average fitted presence probability over the dataset with a
    /// delta-method standard error.
    ///
    /// For constant-presence models this is just `psi_hat`; for occurrence
    /// regressions it is the sample mean of the fitted logistic values, with
    /// the gradient `mean(psi_i (1 - psi_i) z_i)` propagated through the
    /// occurrence block of `vcov`.
    pub fn psi_bar(&self, dataset: &Dataset) -> Option<(f64, f64)> {
        if let Some(psi) = self.psi_hat {
            return Some((psi, self.psi_se.unwrap_or(f64::NAN)));
        }
        let gamma = self.gamma_hat.as_ref()?;
        let formula = crate::model::Formula::from_columns(
            self.occurrence_columns.clone().unwrap_or_default(),
        );
        let zs = crate::model::design_rows(
            dataset,
            &formula,
            crate::model::CovariateSide::Occurrence,
        )
        .ok()?;
        let n = dataset.n() as f64;
        let zdim = gamma.len();
        let mut mean = 0.0;
        let mut grad = vec![0.0; zdim];
        for z in &zs {
            let eta: f64 = gamma.iter().zip(z).map(|(g, zi)| g * zi).sum();
            let psi = crate::model::logistic(eta);
            mean += psi;
            let w = psi * (1.0 - psi);
            for (gj, zj) in grad.iter_mut().zip(z) {
                *gj += w * zj;
            }
        }
        mean /= n;
        for gj in grad.iter_mut() {
            *gj /= n;
        }
        let d = self.detection_dim;
        let mut var = 0.0;
        for i in 0..zdim {
            for j in 0..zdim {
                var += grad[i] * self.vcov[d + i][d + j] * grad[j];
            }
        }
        Some((mean, var.max(0.0).sqrt()))
    }
}

/// Convert a working-scale covariance matrix to the row-major form stored on
/// [`FitResult`].
pub(crate) fn vcov_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Standard errors from the diagonal of a covariance matrix; negative
/// diagonal entries (possible for indefinite numeric Hessians on failed
/// fits) yield NaN.
pub(crate) fn se_from_vcov(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, i)].sqrt()).collect()
}
