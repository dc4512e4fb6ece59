//! Diagnostics for rate heterogeneity and a design-based estimator of the
//! average presence probability.
//!
//! [`bias_rho`] quantifies how far a homogeneous-rate fit drifts when the
//! per-site detection rates actually vary, [`limit_omega`] gives the
//! large-sample target of the constant-presence root under joint presence and
//! detection heterogeneity, and [`ht_psi_bar`] inverse-weights the detected
//! sites by their fitted detection probabilities so that the average presence
//! estimate stays consistent even when the presence side of the model is
//! misspecified.

use nalgebra::DVector;
use serde::Serialize;

use crate::data::{Dataset, Family};
use crate::error::{Error, Result};
use crate::fit::{FitResult, Method};
use crate::model::{design_rows, logistic, CovariateSide, Formula};
use crate::optim::find_root;

/// Attenuation summary for a homogeneous-rate fit applied to data whose
/// detection rates vary across sites.
///
/// The homogeneous presence estimator converges to `rho * psi` rather than
/// the true `psi`, so `rho` in `(0, 1]` measures the shrinkage and
/// `relative_bias = rho - 1` the proportional error of the limit.
#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    /// Mean of the site-rate mixing distribution.
    pub mu: f64,
    /// Variance of the site-rate mixing distribution.
    pub sigma2: f64,
    /// Attenuation factor.
    pub rho: f64,
    /// `rho - 1`; zero exactly when the rates are constant.
    pub relative_bias: f64,
}

impl BiasReport {
    /// Limit of the homogeneous-model presence estimator when the true
    /// presence probability is `psi`.
    pub fn asymptotic_limit(&self, psi: f64) -> f64 {
        self.rho * psi
    }
}

/// Attenuation factor `rho = {1 + sigma2 / (2(e^mu - 1 - mu))}^{-1}` for a
/// site-rate distribution with mean `mu > 0` and variance `sigma2 >= 0`.
pub fn bias_rho(mu: f64, sigma2: f64) -> Result<BiasReport> {
    if !(mu > 0.0) {
        return Err(Error::model("mixing-distribution mean must be positive"));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::model(
            "mixing-distribution variance must be nonnegative",
        ));
    }
    let curvature = mu.exp_m1() - mu;
    let rho = 1.0 / (1.0 + 0.5 * sigma2 / curvature);
    Ok(BiasReport {
        mu,
        sigma2,
        rho,
        relative_bias: rho - 1.0,
    })
}

/// Large-sample target of the constant-presence root when both presence
/// `psi_i` and detection `pi_i` vary across sites.
///
/// Returns `(omega_exact, omega_approx)`: the exact root of
/// `sum_i pi_i (psi_i - omega) / (1 - omega pi_i) = 0` found by bisection,
/// and the detection-weighted mean `mean(psi * pi) / mean(pi)` that
/// approximates it. Both exceed the plain average of `psi` exactly when
/// presence and detection are positively associated.
pub fn limit_omega(pi: &[f64], psi: &[f64]) -> Result<(f64, f64)> {
    if pi.is_empty() || pi.len() != psi.len() {
        return Err(Error::model(
            "pi and psi must be non-empty and of equal length",
        ));
    }
    if !pi
        .iter()
        .chain(psi)
        .all(|&v| v > 0.0 && v < 1.0)
    {
        return Err(Error::model("pi and psi entries must lie in (0, 1)"));
    }
    let approx =
        pi.iter().zip(psi).map(|(&p, &s)| p * s).sum::<f64>() / pi.iter().sum::<f64>();
    let max_pi = pi.iter().cloned().fold(0.0, f64::max);
    let score = |w: f64| -> f64 {
        pi.iter()
            .zip(psi)
            .map(|(&p, &s)| p * (s - w) / (1.0 - w * p))
            .sum()
    };
    // The root lies between min(psi) and max(psi); the score is positive near
    // zero and diverges to -inf approaching the pole at 1/max(pi).
    let hi = (1.0 - 1e-9) / max_pi;
    let exact = find_root(&score, (1e-12, hi), 1e-12)?;
    Ok((exact, approx))
}

/// Average presence probability estimated by inverse detection-probability
/// weighting of the detected sites.
///
/// The point estimate is `n^{-1} sum_{detected} 1 / pi_hat_i`. It is never
/// below the naive occupancy fraction and can exceed one, in which case
/// `boundary` is set and the raw value is reported unchanged.
#[derive(Debug, Clone, Serialize)]
pub struct HtEstimate {
    /// Point estimate of the average presence probability.
    pub psi_bar_hat: f64,
    /// Standard error from [`ht_variance`].
    pub se: f64,
    /// Number of sites.
    pub n: usize,
    /// Number of sites with at least one detection.
    pub detected: usize,
    /// Fitted per-site detection probabilities, in dataset order.
    pub pi_hat: Vec<f64>,
    /// True when the point estimate exceeds one.
    pub boundary: bool,
}

/// Per-site detection probabilities and their parameter gradients under a
/// fitted detection regression.
fn detection_surface(
    dataset: &Dataset,
    fit: &FitResult,
    family: Family,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if fit.family != family || dataset.family() != family {
        return Err(Error::model("family does not match the detection fit"));
    }
    if fit.method != Method::Cl {
        return Err(Error::model(
            "inverse-weighting requires a two-stage (conditional) detection fit",
        ));
    }
    let columns = fit
        .detection_columns
        .clone()
        .ok_or_else(|| Error::model("detection fit carries no covariate design"))?;
    let formula = Formula::from_columns(columns);
    let x = design_rows(dataset, &formula, CovariateSide::Detection)?;
    let theta = &fit.theta_hat;
    if theta.len() != formula.dim() {
        return Err(Error::model("detection coefficient length mismatch"));
    }
    let n = dataset.n();
    let mut pi = Vec::with_capacity(n);
    let mut dpi = Vec::with_capacity(n);
    match family {
        Family::Poisson => {
            for xi in &x {
                let eta: f64 = xi.iter().zip(theta).map(|(a, b)| a * b).sum();
                let lambda = eta.exp();
                pi.push(-(-lambda).exp_m1());
                let scale = (-lambda).exp() * lambda;
                dpi.push(xi.iter().map(|&v| scale * v).collect());
            }
        }
        Family::Binomial => {
            let t = dataset.visits() as f64;
            for xi in &x {
                let eta: f64 = xi.iter().zip(theta).map(|(a, b)| a * b).sum();
                let p = logistic(eta);
                let pii = -(t * (-p).ln_1p()).exp_m1();
                pi.push(pii);
                let scale = t * p * (1.0 - pii);
                dpi.push(xi.iter().map(|&v| scale * v).collect());
            }
        }
    }
    Ok((pi, dpi))
}

/// Inverse detection-probability estimate of the average presence
/// probability, with its standard error.
///
/// `detection_fit` must be a conditional-likelihood regression fit of the
/// matching family; only its detection stage is used, so the presence side of
/// the fitted model does not influence the estimate. Errors if a detected
/// site has fitted detection probability zero.
pub fn ht_psi_bar(
    dataset: &Dataset,
    detection_fit: &FitResult,
    family: Family,
) -> Result<HtEstimate> {
    let (pi, _) = detection_surface(dataset, detection_fit, family)?;
    let n = dataset.n();
    let mut sum = 0.0;
    let mut detected = 0usize;
    for (r, &p) in dataset.records().iter().zip(&pi) {
        if r.y == 0 {
            continue;
        }
        if p <= 0.0 {
            return Err(Error::numerical(
                "detected site has fitted detection probability zero",
            ));
        }
        sum += 1.0 / p;
        detected += 1;
    }
    let psi_bar_hat = sum / n as f64;
    let mut ht = HtEstimate {
        psi_bar_hat,
        se: 0.0,
        n,
        detected,
        pi_hat: pi,
        boundary: psi_bar_hat > 1.0,
    };
    let var = ht_variance(dataset, detection_fit, &ht, family)?;
    ht.se = var.max(0.0).sqrt();
    Ok(ht)
}

/// Variance estimate for [`ht_psi_bar`].
///
/// Two terms, scaled by `n^{-2}`: a per-site binomial-style contribution
/// `sum_{detected} (1 - psi_bar_hat * pi_i) / pi_i^2` and the quadratic form
/// `D' var(theta_hat) D` with `D_j = sum_{detected} (d pi_i / d theta_j) /
/// pi_i^2` propagating the detection-stage uncertainty.
pub fn ht_variance(
    dataset: &Dataset,
    detection_fit: &FitResult,
    ht: &HtEstimate,
    family: Family,
) -> Result<f64> {
    if detection_fit.vcov.is_empty() {
        return Err(Error::model("detection fit carries no variance matrix"));
    }
    if ht.pi_hat.len() != dataset.n() {
        return Err(Error::model("estimate does not match the dataset size"));
    }
    let (pi, dpi) = detection_surface(dataset, detection_fit, family)?;
    let d = detection_fit.detection_dim;
    let v_theta = detection_fit.detection_vcov();
    let psi = ht.psi_bar_hat;
    let mut site_term = 0.0;
    let mut dvec = DVector::zeros(d);
    for (i, r) in dataset.records().iter().enumerate() {
        if r.y == 0 {
            continue;
        }
        let p = pi[i];
        if p <= 0.0 {
            return Err(Error::numerical(
                "detected site has fitted detection probability zero",
            ));
        }
        site_term += (1.0 - psi * p) / (p * p);
        for j in 0..d {
            dvec[j] += dpi[i][j] / (p * p);
        }
    }
    let quad = dvec.dot(&(&v_theta * &dvec));
    let n = dataset.n() as f64;
    Ok((site_term + quad) / (n * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SiteRecord;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rho_is_one_without_heterogeneity() {
        let r = bias_rho(1.0, 0.0).unwrap();
        assert_eq!(r.rho, 1.0);
        assert_eq!(r.relative_bias, 0.0);
        assert_eq!(r.asymptotic_limit(0.5), 0.5);
    }

    #[test]
    fn rho_matches_closed_form_oracle() {
        // rho(1, 1) = (e - 2) / (e - 2 + 1/2); mpmath gives
        // 0.589585932975435157, a relative bias of -41.04%.
        let r = bias_rho(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(r.rho, 0.589585932975435157, epsilon = 1e-14);
        assert_abs_diff_eq!(r.relative_bias * 100.0, -41.0414067024564843, epsilon = 1e-11);
        assert_abs_diff_eq!(r.asymptotic_limit(0.5), 0.2947929664877176, epsilon = 1e-14);
        // Large mean: heterogeneity of the same size barely matters.
        let r5 = bias_rho(5.0, 1.0).unwrap();
        assert_abs_diff_eq!(r5.rho, 0.996501371860087967, epsilon = 1e-14);
        assert!(r5.relative_bias.abs() < 0.01);
    }

    #[test]
    fn rho_moves_the_right_way() {
        let base = bias_rho(1.0, 1.0).unwrap().rho;
        assert!(bias_rho(1.5, 1.0).unwrap().rho > base);
        assert!(bias_rho(1.0, 2.0).unwrap().rho < base);
    }

    #[test]
    fn rho_rejects_bad_inputs() {
        assert!(bias_rho(0.0, 1.0).is_err());
        assert!(bias_rho(-1.0, 1.0).is_err());
        assert!(bias_rho(1.0, -0.5).is_err());
        assert!(bias_rho(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn omega_recovers_constant_presence() {
        let pi = [0.2, 0.5, 0.9, 0.35];
        let psi = [0.4; 4];
        let (exact, approx) = limit_omega(&pi, &psi).unwrap();
        assert_abs_diff_eq!(exact, 0.4, epsilon = 1e-9);
        assert_abs_diff_eq!(approx, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn omega_two_site_oracle() {
        // psi = (0.9, 0.3), pi = (0.9, 0.1): the weighted mean is
        // 0.42 / 0.5 = 0.84 and the quadratic root (mpmath) is
        // 0.885507406058986, both above the plain average 0.6.
        let (exact, approx) = limit_omega(&[0.9, 0.1], &[0.9, 0.3]).unwrap();
        assert_abs_diff_eq!(approx, 0.84, epsilon = 1e-12);
        assert_abs_diff_eq!(exact, 0.885507406058986, epsilon = 1e-9);
        assert!(exact > 0.6 && approx > 0.6);
    }

    #[test]
    fn omega_rejects_bad_inputs() {
        assert!(limit_omega(&[], &[]).is_err());
        assert!(limit_omega(&[0.5], &[0.5, 0.5]).is_err());
        assert!(limit_omega(&[0.0, 0.5], &[0.5, 0.5]).is_err());
        assert!(limit_omega(&[0.5, 0.5], &[1.0, 0.5]).is_err());
    }

    fn poisson_dataset(ys: &[u64], xs: Option<&[f64]>) -> Dataset {
        let records: Vec<SiteRecord> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| SiteRecord {
                site_id: format!("s{i}"),
                y,
                visits: 1,
                x: match xs {
                    Some(v) => vec![1.0, v[i]],
                    None => vec![1.0],
                },
                z: vec![1.0],
            })
            .collect();
        let x_names = match xs {
            Some(_) => vec!["x1".to_string()],
            None => vec![],
        };
        Dataset::new(records, Family::Poisson, x_names, vec![]).unwrap()
    }

    fn stub_cl_fit(
        family: Family,
        theta: Vec<f64>,
        columns: Vec<String>,
        vcov: Vec<Vec<f64>>,
    ) -> FitResult {
        let d = theta.len();
        FitResult {
            family,
            method: Method::Cl,
            model: "stub".to_string(),
            param_names: (0..d).map(|j| format!("theta_{j}")).collect(),
            params: theta.clone(),
            se: vec![0.0; d],
            vcov,
            detection_dim: d,
            theta_hat: theta,
            psi_hat: None,
            psi_se: None,
            gamma_hat: None,
            detection_columns: Some(columns),
            occurrence_columns: None,
            loglik: 0.0,
            aic: 0.0,
            converged: true,
            boundary: vec![],
            iterations: 0,
            gradient_norm: 0.0,
            cell_probs: None,
            n: 0,
            m_plus: 0,
        }
    }

    #[test]
    fn single_site_doubles_and_flags() {
        // One detected site with lambda = ln 2 gives pi = 1/2, so the
        // weighted estimate is 2 and sits past the boundary. Its variance is
        // (1 - 2 * 0.5) / 0.25 = 0 with a degenerate theta variance.
        let ds = poisson_dataset(&[2], None);
        let fit = stub_cl_fit(
            Family::Poisson,
            vec![std::f64::consts::LN_2.ln()],
            vec![],
            vec![vec![0.0]],
        );
        // theta is log lambda, so lambda = ln 2 needs theta = ln ln 2.
        let ht = ht_psi_bar(&ds, &fit, Family::Poisson).unwrap();
        assert_abs_diff_eq!(ht.pi_hat[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ht.psi_bar_hat, 2.0, epsilon = 1e-12);
        assert!(ht.boundary);
        assert_eq!(ht.detected, 1);
        assert_abs_diff_eq!(ht.se, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn perfect_detection_gives_occupancy_fraction() {
        // theta = 40 makes pi indistinguishable from one, so the estimate is
        // m_+/n and the variance collapses to m_+ (1 - psi) / n^2.
        let ds = poisson_dataset(&[3, 0, 1, 0, 2, 0, 0, 0, 1, 0], None);
        let fit = stub_cl_fit(Family::Poisson, vec![40.0], vec![], vec![vec![0.0]]);
        let ht = ht_psi_bar(&ds, &fit, Family::Poisson).unwrap();
        assert_abs_diff_eq!(ht.psi_bar_hat, 0.4, epsilon = 1e-12);
        assert!(!ht.boundary);
        let var = ht_variance(&ds, &fit, &ht, Family::Poisson).unwrap();
        assert_abs_diff_eq!(var, 4.0 * 0.6 / 100.0, epsilon = 1e-12);
    }

    #[test]
    fn estimate_never_falls_below_occupancy_fraction() {
        let ds = poisson_dataset(&[5, 0, 2, 8, 0, 1], None);
        let fit = stub_cl_fit(Family::Poisson, vec![2.0], vec![], vec![vec![0.0]]);
        let ht = ht_psi_bar(&ds, &fit, Family::Poisson).unwrap();
        assert!(ht.psi_bar_hat >= ht.detected as f64 / ht.n as f64);
    }

    #[test]
    fn rejects_full_likelihood_and_designless_fits() {
        let ds = poisson_dataset(&[1, 0], None);
        let mut fit = stub_cl_fit(Family::Poisson, vec![0.5], vec![], vec![vec![0.1]]);
        fit.method = Method::Ml;
        assert!(ht_psi_bar(&ds, &fit, Family::Poisson).is_err());
        let mut fit2 = stub_cl_fit(Family::Poisson, vec![0.5], vec![], vec![vec![0.1]]);
        fit2.detection_columns = None;
        assert!(ht_psi_bar(&ds, &fit2, Family::Poisson).is_err());
        let fit3 = stub_cl_fit(Family::Binomial, vec![0.5], vec![], vec![vec![0.1]]);
        assert!(ht_psi_bar(&ds, &fit3, Family::Binomial).is_err());
    }

    #[test]
    fn zero_detection_probability_is_an_error() {
        // lambda = e^{-800} underflows to zero, so pi = 0 at a detected site.
        let ds = poisson_dataset(&[1], None);
        let fit = stub_cl_fit(Family::Poisson, vec![-800.0], vec![], vec![vec![0.0]]);
        assert!(ht_psi_bar(&ds, &fit, Family::Poisson).is_err());
    }

    #[test]
    fn theta_gradient_matches_finite_differences_poisson() {
        let ys = [2, 0, 1, 4, 0, 3, 1, 0];
        let xs = [0.3, -0.7, 1.2, 0.1, -0.4, 0.8, -1.1, 0.5];
        let ds = poisson_dataset(&ys, Some(&xs));
        let theta = vec![0.2, 0.4];
        let fit = stub_cl_fit(
            Family::Poisson,
            theta.clone(),
            vec!["x1".to_string()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let ht = ht_psi_bar(&ds, &fit, Family::Poisson).unwrap();
        let var = ht_variance(&ds, &fit, &ht, Family::Poisson).unwrap();
        let n = ys.len() as f64;
        let site_term: f64 = ds
            .records()
            .iter()
            .zip(&ht.pi_hat)
            .filter(|(r, _)| r.y > 0)
            .map(|(_, &p)| (1.0 - ht.psi_bar_hat * p) / (p * p))
            .sum();
        // With identity theta variance the quadratic term is |D|^2, and D is
        // the negated theta-gradient of sum_{detected} 1/pi_i.
        let quad = var * n * n - site_term;
        let sum_inv = |th: &[f64]| -> f64 {
            ds.records()
                .iter()
                .zip(&xs)
                .filter(|(r, _)| r.y > 0)
                .map(|(_, &x)| {
                    let lambda = (th[0] + th[1] * x).exp();
                    1.0 / (-(-lambda).exp_m1())
                })
                .sum()
        };
        let eps = 1e-6;
        let mut fd_norm2 = 0.0;
        for j in 0..2 {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += eps;
            dn[j] -= eps;
            let g = (sum_inv(&up) - sum_inv(&dn)) / (2.0 * eps);
            fd_norm2 += g * g;
        }
        assert_abs_diff_eq!(quad, fd_norm2, epsilon = 1e-4 * fd_norm2);
    }

    #[test]
    fn theta_gradient_matches_finite_differences_binomial() {
        let ys = [2u64, 0, 5, 1, 0, 3];
        let xs = [0.3, -0.7, 1.2, 0.1, -0.4, 0.8];
        let records: Vec<SiteRecord> = ys
            .iter()
            .zip(&xs)
            .enumerate()
            .map(|(i, (&y, &x))| SiteRecord {
                site_id: format!("s{i}"),
                y,
                visits: 5,
                x: vec![1.0, x],
                z: vec![1.0],
            })
            .collect();
        let ds = Dataset::new(
            records,
            Family::Binomial,
            vec!["x1".to_string()],
            vec![],
        )
        .unwrap();
        let theta = vec![-0.5, 0.6];
        let fit = stub_cl_fit(
            Family::Binomial,
            theta.clone(),
            vec!["x1".to_string()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let ht = ht_psi_bar(&ds, &fit, Family::Binomial).unwrap();
        let var = ht_variance(&ds, &fit, &ht, Family::Binomial).unwrap();
        let n = ys.len() as f64;
        let site_term: f64 = ds
            .records()
            .iter()
            .zip(&ht.pi_hat)
            .filter(|(r, _)| r.y > 0)
            .map(|(_, &p)| (1.0 - ht.psi_bar_hat * p) / (p * p))
            .sum();
        let quad = var * n * n - site_term;
        let sum_inv = |th: &[f64]| -> f64 {
            ds.records()
                .iter()
                .zip(&xs)
                .filter(|(r, _)| r.y > 0)
                .map(|(_, &x)| {
                    let p = logistic(th[0] + th[1] * x);
                    1.0 / (-(5.0 * (-p).ln_1p()).exp_m1())
                })
                .sum()
        };
        let eps = 1e-6;
        let mut fd_norm2 = 0.0;
        for j in 0..2 {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += eps;
            dn[j] -= eps;
            let g = (sum_inv(&up) - sum_inv(&dn)) / (2.0 * eps);
            fd_norm2 += g * g;
        }
        assert_abs_diff_eq!(quad, fd_norm2, epsilon = 1e-4 * fd_norm2);
    }
}
