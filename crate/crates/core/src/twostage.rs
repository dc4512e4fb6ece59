//! Presence-stage machinery shared by the two-stage conditional fits.
//!
//! After the detection stage, both count families reduce to the same problem:
//! detection indicators I_i with plug-in per-site detection probabilities
//! pi_i, and either a constant presence probability (a scalar root equation)
//! or a logistic occurrence regression (a profile likelihood). Detection-stage
//! uncertainty enters only through d pi_i / d theta, which the caller supplies
//! per site.

use nalgebra::{DMatrix, DVector};

use crate::data::{Family, FrequencyTable};
use crate::error::Result;
use crate::fit::{se_from_vcov, vcov_rows, FitResult, Method};
use crate::model::logistic;
use crate::optim::{find_root, maximize, numeric_hessian, sym_inverse, OptimOptions, OptimResult};

/// Root equation for the constant-presence stage:
/// S(psi) = m_+/psi - sum_{undetected} pi_i/(1 - psi pi_i).
/// Returns the root and whether it sits at the boundary psi = 1.
pub(crate) fn presence_root(m_plus: f64, pi_undetected: &[f64]) -> (f64, bool) {
    let s = |psi: f64| {
        m_plus / psi
            - pi_undetected
                .iter()
                .map(|&pi| pi / (1.0 - psi * pi))
                .sum::<f64>()
    };
    let hi = 1.0 - 1e-12;
    if s(hi) > 0.0 {
        return (1.0, true);
    }
    let root = find_root(&s, (1e-12, hi), 1e-10).expect("root function is monotone decreasing");
    (root, false)
}

pub(crate) struct ConstantPresence {
    pub psi: f64,
    pub at_one: bool,
    pub var_psi: f64,
    /// Covariance of (theta-hat, psi-hat) on the natural psi scale.
    pub cov_theta_psi: DVector<f64>,
}

/// Variance pieces of the constant-presence stage at a given psi: curvature of
/// the root function plus propagation of the detection-stage covariance.
/// `dpi_rows[i]` holds d pi_i / d theta; rows for detected sites are not read.
pub(crate) fn constant_presence_variance(
    m_plus: f64,
    psi: f64,
    at_one: bool,
    detected: &[bool],
    pis: &[f64],
    dpi_rows: &[Vec<f64>],
    v_theta: &DMatrix<f64>,
) -> ConstantPresence {
    let psi_eval = psi.min(1.0 - 1e-9);
    let d = v_theta.nrows();
    let mut a = m_plus / (psi_eval * psi_eval);
    let mut b = DVector::zeros(d);
    for i in 0..detected.len() {
        if detected[i] {
            continue;
        }
        let denom = 1.0 - psi_eval * pis[i];
        a += pis[i] * pis[i] / (denom * denom);
        // dS/dtheta_j = -sum_{undetected} (dpi_i/dtheta_j)/(1 - psi pi_i)^2.
        for j in 0..d {
            b[j] -= dpi_rows[i][j] / (denom * denom);
        }
    }
    let dpsi_dtheta = &b / a;
    let var_psi = 1.0 / a + (dpsi_dtheta.transpose() * v_theta * &dpsi_dtheta)[(0, 0)];
    let cov_theta_psi = v_theta * &dpsi_dtheta;
    ConstantPresence {
        psi,
        at_one,
        var_psi,
        cov_theta_psi,
    }
}

/// Solve the constant-presence root and attach its variance.
pub(crate) fn constant_presence_stage(
    m_plus: f64,
    detected: &[bool],
    pis: &[f64],
    dpi_rows: &[Vec<f64>],
    v_theta: &DMatrix<f64>,
) -> ConstantPresence {
    let pi_undetected: Vec<f64> = pis
        .iter()
        .zip(detected)
        .filter(|(_, &d)| !d)
        .map(|(&pi, _)| pi)
        .collect();
    let (psi, at_one) = presence_root(m_plus, &pi_undetected);
    constant_presence_variance(m_plus, psi, at_one, detected, pis, dpi_rows, v_theta)
}

/// Working covariance for a detection block plus a constant presence term on
/// the logit scale; NaN entries when psi sits at the boundary.
pub(crate) fn constant_presence_vcov(
    v_theta: &DMatrix<f64>,
    cp: &ConstantPresence,
) -> (DMatrix<f64>, f64) {
    let d = v_theta.nrows();
    let (w_psi, var_w, jac) = if cp.psi < 1.0 {
        let jac = cp.psi * (1.0 - cp.psi);
        (
            (cp.psi / (1.0 - cp.psi)).ln(),
            cp.var_psi / (jac * jac),
            jac,
        )
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    let mut vcov = DMatrix::zeros(d + 1, d + 1);
    for i in 0..d {
        for j in 0..d {
            vcov[(i, j)] = v_theta[(i, j)];
        }
        vcov[(i, d)] = cp.cov_theta_psi[i] / jac;
        vcov[(d, i)] = vcov[(i, d)];
    }
    vcov[(d, d)] = var_w;
    (vcov, w_psi)
}

pub(crate) struct ProfilePresence {
    pub gamma: Vec<f64>,
    pub v_gamma: DMatrix<f64>,
    /// cov(theta-hat, gamma-hat), dim(theta) x dim(gamma).
    pub cross: DMatrix<f64>,
    pub opt: OptimResult,
}

/// Maximize the profile occurrence likelihood
/// l2(gamma) = sum_detected log psi_i + sum_undetected log(1 - psi_i pi_i)
/// with psi_i = logistic(z_i' gamma), and propagate the detection-stage
/// covariance through the cross-derivative of the gamma-score.
pub(crate) fn profile_presence_stage(
    z: &[Vec<f64>],
    detected: &[bool],
    pis: &[f64],
    dpi_rows: &[Vec<f64>],
    v_theta: &DMatrix<f64>,
    psi0: f64,
) -> Result<ProfilePresence> {
    let n = detected.len();
    let q = z[0].len();
    let l2 = |gamma: &[f64]| {
        let mut ll = 0.0;
        for i in 0..n {
            let psi = logistic(dot(&z[i], gamma));
            if detected[i] {
                if psi <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                ll += psi.ln();
            } else {
                let cell = 1.0 - psi * pis[i];
                if cell <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                ll += cell.ln();
            }
        }
        ll
    };
    let score2 = |gamma: &[f64]| {
        let mut g = vec![0.0; q];
        for i in 0..n {
            let psi = logistic(dot(&z[i], gamma));
            let w = if detected[i] {
                1.0 - psi
            } else {
                -psi * (1.0 - psi) * pis[i] / (1.0 - psi * pis[i])
            };
            for j in 0..q {
                g[j] += w * z[i][j];
            }
        }
        g
    };
    let mut g0 = vec![0.0; q];
    g0[0] = (psi0 / (1.0 - psi0)).ln();
    let opt = maximize(&l2, Some(&score2), &g0, &OptimOptions::default())?;
    let gamma = opt.argmax.clone();

    let a_mat = -numeric_hessian(&l2, &gamma)?;
    let (a_inv, _) = sym_inverse(&a_mat)?;
    // Cross-derivative of the gamma-score in theta:
    // B[j][k] = -sum_{undetected} psi(1-psi) z_ij (dpi_i/dtheta_k) / (1-psi pi)^2.
    let d = v_theta.nrows();
    let mut b_mat = DMatrix::zeros(q, d);
    for i in 0..n {
        if detected[i] {
            continue;
        }
        let psi = logistic(dot(&z[i], &gamma));
        let denom = 1.0 - psi * pis[i];
        let w = -psi * (1.0 - psi) / (denom * denom);
        for j in 0..q {
            for k in 0..d {
                b_mat[(j, k)] += w * z[i][j] * dpi_rows[i][k];
            }
        }
    }
    let sens = &a_inv * &b_mat; // d gamma-hat / d theta'
    let v_gamma = &a_inv + &sens * v_theta * sens.transpose();
    let cross = v_theta * sens.transpose();
    Ok(ProfilePresence {
        gamma,
        v_gamma,
        cross,
        opt,
    })
}

/// Assemble [[V_theta, C], [C', V_occ]].
pub(crate) fn block_vcov(
    v_theta: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    v_occ: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = v_theta.nrows();
    let q = v_occ.nrows();
    let mut vcov = DMatrix::zeros(d + q, d + q);
    for i in 0..d {
        for j in 0..d {
            vcov[(i, j)] = v_theta[(i, j)];
        }
        for j in 0..q {
            vcov[(i, d + j)] = cross[(i, j)];
            vcov[(d + j, i)] = cross[(i, j)];
        }
    }
    for i in 0..q {
        for j in 0..q {
            vcov[(d + i, d + j)] = v_occ[(i, j)];
        }
    }
    vcov
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Re-embed an optimizer result with one frozen coordinate into the full
/// parameter vector, pinning the frozen coordinate with huge curvature so the
/// inverted Hessian carries ~zero variance for it.
pub(crate) fn expand_frozen(opt: &OptimResult, frozen_at: usize, frozen_value: f64) -> OptimResult {
    let mut argmax = opt.argmax.clone();
    argmax.insert(frozen_at, frozen_value);
    let p = argmax.len();
    let mut hess = DMatrix::zeros(p, p);
    let full_idx: Vec<usize> = (0..p).filter(|&i| i != frozen_at).collect();
    for (ri, &fi) in full_idx.iter().enumerate() {
        for (rj, &fj) in full_idx.iter().enumerate() {
            hess[(fi, fj)] = opt.hessian[(ri, rj)];
        }
    }
    hess[(frozen_at, frozen_at)] = -1e30;
    OptimResult {
        argmax,
        value: opt.value,
        gradient_norm: opt.gradient_norm,
        hessian: hess,
        converged: opt.converged,
        hessian_negative_definite: opt.hessian_negative_definite,
        iterations: opt.iterations,
    }
}

/// Finish a frequency-table CL fit: detection covariance from the truncated
/// likelihood, closed-form presence m_+/(n p_+), and the propagated presence
/// variance. The detection probability is constant across sites, so the
/// generic presence-stage pieces specialize with one shared pi.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_cl_frequency(
    family: Family,
    freq: &FrequencyTable,
    model: &str,
    theta_names: Vec<String>,
    theta_c: Vec<f64>,
    l1: &dyn Fn(&[f64]) -> f64,
    p_plus_fn: &dyn Fn(&[f64]) -> f64,
    opt1: OptimResult,
    extra_boundary: Vec<String>,
    natural_theta: Vec<f64>,
    cell_probs: Option<Vec<f64>>,
    frozen: Option<usize>,
) -> Result<FitResult> {
    let n = freq.n() as usize;
    let m_plus = freq.m_plus() as usize;
    let d = theta_c.len();
    let p_plus = p_plus_fn(&theta_c);
    let psi = m_plus as f64 / (n as f64 * p_plus);

    let mut h1 = numeric_hessian(l1, &theta_c)?;
    if let Some(fi) = frozen {
        for j in 0..d {
            h1[(fi, j)] = 0.0;
            h1[(j, fi)] = 0.0;
        }
        h1[(fi, fi)] = -1e30;
    }
    let (v_theta, _) = sym_inverse(&-h1)?;

    // d p_+/d theta by central differences, then the shared variance pieces
    // with every site carrying the same detection probability.
    let base = f64::EPSILON.cbrt();
    let mut dp = vec![0.0; d];
    for j in 0..d {
        if frozen == Some(j) {
            continue;
        }
        let h = base * (theta_c[j].abs() + 1.0);
        let mut t = theta_c.clone();
        t[j] = theta_c[j] + h;
        let hi = p_plus_fn(&t);
        t[j] = theta_c[j] - h;
        let lo = p_plus_fn(&t);
        dp[j] = (hi - lo) / (2.0 * h);
    }
    let detected: Vec<bool> = (0..n).map(|i| i < m_plus).collect();
    let pis = vec![p_plus; n];
    let dpi_rows = vec![dp; n];
    let cp = constant_presence_variance(
        m_plus as f64,
        psi,
        psi >= 1.0,
        &detected,
        &pis,
        &dpi_rows,
        &v_theta,
    );
    let (vcov, w_psi) = constant_presence_vcov(&v_theta, &cp);

    let mut boundary = extra_boundary;
    if cp.at_one {
        boundary.push("presence estimate at or above one".to_string());
    }
    let mut param_names = theta_names;
    param_names.push("logit_psi".to_string());
    let mut params = theta_c;
    params.push(w_psi);
    let p = d + 1;
    Ok(FitResult {
        family,
        method: Method::Cl,
        model: model.to_string(),
        param_names,
        params,
        se: se_from_vcov(&vcov),
        vcov: vcov_rows(&vcov),
        detection_dim: d,
        theta_hat: natural_theta,
        psi_hat: Some(psi),
        psi_se: Some(cp.var_psi.max(0.0).sqrt()),
        gamma_hat: None,
        detection_columns: None,
        occurrence_columns: None,
        loglik: opt1.value,
        aic: 2.0 * p as f64 - 2.0 * opt1.value,
        converged: opt1.converged,
        boundary,
        iterations: opt1.iterations,
        gradient_norm: opt1.gradient_norm,
        cell_probs,
        n,
        m_plus,
    })
}

/// Finish a frequency-table ML fit whose last working parameter is logit psi.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_ml_frequency(
    family: Family,
    freq: &FrequencyTable,
    opt: OptimResult,
    model: &str,
    param_names: Vec<String>,
    detection_dim: usize,
    natural_theta: Vec<f64>,
    cell_probs: Option<Vec<f64>>,
) -> FitResult {
    let p = opt.argmax.len();
    let (vcov, _) = sym_inverse(&-opt.hessian.clone())
        .unwrap_or_else(|_| (DMatrix::from_element(p, p, f64::NAN), true));
    let eta = opt.argmax[p - 1];
    let psi = logistic(eta);
    let jac = psi * (1.0 - psi);
    let psi_se = (vcov[(p - 1, p - 1)] * jac * jac).max(0.0).sqrt();
    let mut boundary = Vec::new();
    // A presence estimate within 1e-6 of zero or one is a boundary solution:
    // the logit has saturated and the reported curvature is meaningless there.
    if psi >= 1.0 - 1e-6 || psi <= 1e-6 {
        boundary.push("presence estimate at boundary".to_string());
    }
    FitResult {
        family,
        method: Method::Ml,
        model: model.to_string(),
        param_names,
        params: opt.argmax.clone(),
        se: se_from_vcov(&vcov),
        vcov: vcov_rows(&vcov),
        detection_dim,
        theta_hat: natural_theta,
        psi_hat: Some(psi),
        psi_se: Some(psi_se),
        gamma_hat: None,
        detection_columns: None,
        occurrence_columns: None,
        loglik: opt.value,
        aic: 2.0 * p as f64 - 2.0 * opt.value,
        converged: opt.converged,
        boundary,
        iterations: opt.iterations,
        gradient_norm: opt.gradient_norm,
        cell_probs,
        n: freq.n() as usize,
        m_plus: freq.m_plus() as usize,
    }
}
