//! Zero-inflated binomial (presence-absence) fitters for T-visit designs:
//! homogeneous, beta-mixed, and regression detection models, by full ML and
//! by two-stage conditional likelihood.
//!
//! The structure mirrors the Poisson family: the CL route fits detection on
//! the zero-truncated likelihood of the detected sites, then recovers the
//! presence component through the shared presence-stage machinery.

use nalgebra::DMatrix;

use crate::data::{Dataset, Family, FrequencyTable};
use crate::error::{Error, Result};
use crate::fit::{se_from_vcov, vcov_rows, FitResult, Method};
use crate::model::{design_rows, full_rank, log1p_exp, logistic, logit, CovariateSide, Formula};
use crate::optim::{find_root, maximize, sym_inverse, OptimOptions, OptimResult};
use crate::twostage::{
    block_vcov, constant_presence_stage, constant_presence_vcov, dot, expand_frozen,
    finish_cl_frequency, finish_ml_frequency, profile_presence_stage,
};
use crate::zip::ln_factorial_table;

/// Precision value treated as the homogeneous limit of the beta mixture.
pub const PRECISION_CAP: f64 = 1e8;

/// ln C(T, k) from a factorial table covering index T.
fn ln_choose(ln_fact: &[f64], t: u64, k: u64) -> f64 {
    ln_fact[t as usize] - ln_fact[k as usize] - ln_fact[(t - k) as usize]
}

/// Detection probability over T visits: pi = 1 - (1-p)^T, stable for small p.
fn pi_binomial(p: f64, t: f64) -> f64 {
    -(t * (-p).ln_1p()).exp_m1()
}

/// Beta-binomial cell probability on the (mean, precision) scale:
/// p ~ Beta(m s, (1-m) s), y | p ~ Bin(T, p).
fn log_beta_binomial_cell(m: f64, s: f64, t: u64, k: u64, ln_fact: &[f64]) -> f64 {
    let alpha = m * s;
    let beta = (1.0 - m) * s;
    let mut ll = ln_choose(ln_fact, t, k);
    for j in 0..k {
        ll += (alpha + j as f64).ln();
    }
    for j in 0..(t - k) {
        ll += (beta + j as f64).ln();
    }
    for j in 0..t {
        ll -= (s + j as f64).ln();
    }
    ll
}

/// Zero cell of the beta-binomial, as a product of ratios.
fn beta_binomial_p0(m: f64, s: f64, t: u64) -> f64 {
    let beta = (1.0 - m) * s;
    let mut p0 = 1.0;
    for j in 0..t {
        p0 *= (beta + j as f64) / (s + j as f64);
    }
    p0
}

/// Working (logit mean, log precision) -> (mean, precision), capped.
fn beta_params(w: &[f64]) -> (f64, f64) {
    (logistic(w[0]), w[1].exp().min(PRECISION_CAP))
}

fn validate_freq(freq: &FrequencyTable, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::model("binomial models need at least one visit"));
    }
    if freq.max_count() > t {
        return Err(Error::data(format!(
            "count {} exceeds the {} visits",
            freq.max_count(),
            t
        )));
    }
    if freq.m_plus() == 0 {
        return Err(Error::model(
            "presence unidentifiable: no site has a detection",
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Homogeneous model
// ---------------------------------------------------------------------------

/// Fit the single-probability zero-inflated binomial to a detection-count
/// frequency table with T visits per site.
pub fn fit_zib_homogeneous(freq: &FrequencyTable, t: u64, method: Method) -> Result<FitResult> {
    validate_freq(freq, t)?;
    let n = freq.n() as f64;
    let m_plus = freq.m_plus() as f64;
    let tf = t as f64;
    let ln_fact = ln_factorial_table(t);
    let mean_pos = freq.mean_positive();

    if mean_pos <= 1.0 + 1e-12 {
        return Ok(boundary_fit_homogeneous(freq, t, method));
    }
    if mean_pos >= tf - 1e-9 {
        // Every detected site was detected on every visit: p at one.
        return Ok(boundary_fit_saturated(freq, t, method));
    }

    // Truncated-mean equation T p / pi(p) = mean of positives.
    let mean_eq = |p: f64| tf * p / pi_binomial(p, tf) - mean_pos;
    let p_c = find_root(&mean_eq, (1e-12, 1.0 - 1e-12), 1e-12)?;

    let l1 = |w: &[f64]| {
        let p = logistic(w[0]);
        let lnpi = pi_binomial(p, tf).ln();
        let mut ll = 0.0;
        for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
            ll += m as f64
                * (k as f64 * w[0] - tf * log1p_exp(w[0]) + ln_choose(&ln_fact, t, k) - lnpi);
        }
        ll
    };

    match method {
        Method::Cl => {
            let theta_c = vec![logit(p_c)];
            let opt1 = OptimResult {
                argmax: theta_c.clone(),
                value: l1(&theta_c),
                gradient_norm: mean_eq(p_c).abs(),
                hessian: DMatrix::zeros(1, 1),
                converged: true,
                hessian_negative_definite: true,
                iterations: 0,
            };
            let cells = binomial_cells(p_c, t, &ln_fact);
            finish_cl_frequency(
                Family::Binomial,
                freq,
                "zib-homogeneous",
                vec!["logit_p".into()],
                theta_c,
                &l1,
                &|w| pi_binomial(logistic(w[0]), tf),
                opt1,
                Vec::new(),
                vec![p_c],
                Some(cells),
                None,
            )
        }
        Method::Ml => {
            let loglik_full = |w: &[f64]| {
                let (p, psi) = (logistic(w[0]), logistic(w[1]));
                let pi = pi_binomial(p, tf);
                let zero_cell = 1.0 - psi * pi;
                if !(zero_cell > 0.0) {
                    return f64::NEG_INFINITY;
                }
                let mut ll = freq.count(0) as f64 * zero_cell.ln();
                for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
                    ll += m as f64
                        * (psi.ln() + k as f64 * w[0] - tf * log1p_exp(w[0])
                            + ln_choose(&ln_fact, t, k));
                }
                ll
            };
            let grad = |w: &[f64]| {
                let (p, psi) = (logistic(w[0]), logistic(w[1]));
                let pi = pi_binomial(p, tf);
                let m0 = freq.count(0) as f64;
                let denom = 1.0 - psi * pi;
                // d pi / d logit p = T p (1-p)^T.
                let dpi = tf * p * (1.0 - pi);
                let mut d_eta_p = -m0 * psi * dpi / denom;
                for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
                    d_eta_p += m as f64 * (k as f64 - tf * p);
                }
                let d_eta_psi = m_plus * (1.0 - psi) - m0 * psi * (1.0 - psi) * pi / denom;
                vec![d_eta_p, d_eta_psi]
            };
            let pi_c = pi_binomial(p_c, tf);
            let psi_c = (m_plus / (n * pi_c)).clamp(1e-6, 1.0 - 1e-6);
            let init = [logit(p_c), logit(psi_c)];
            let opt = maximize(&loglik_full, Some(&grad), &init, &OptimOptions::default())?;
            let p_hat = logistic(opt.argmax[0]);
            let cells = binomial_cells(p_hat, t, &ln_fact);
            Ok(finish_ml_frequency(
                Family::Binomial,
                freq,
                opt,
                "zib-homogeneous",
                vec!["logit_p".into(), "logit_psi".into()],
                1,
                vec![p_hat],
                Some(cells),
            ))
        }
    }
}

fn binomial_cells(p: f64, t: u64, ln_fact: &[f64]) -> Vec<f64> {
    (0..=t)
        .map(|k| {
            (ln_choose(ln_fact, t, k) + k as f64 * p.ln() + (t - k) as f64 * (-p).ln_1p()).exp()
        })
        .collect()
}

fn boundary_fit_homogeneous(freq: &FrequencyTable, _t: u64, method: Method) -> FitResult {
    degenerate_fit(
        freq,
        method,
        vec!["logit_p".into(), "logit_psi".into()],
        vec![0.0],
        "positive-count mean at or below one: detection probability at zero boundary",
    )
}

fn boundary_fit_saturated(freq: &FrequencyTable, _t: u64, method: Method) -> FitResult {
    degenerate_fit(
        freq,
        method,
        vec!["logit_p".into(), "logit_psi".into()],
        vec![1.0],
        "every detected site saturated: detection probability at one boundary",
    )
}

fn degenerate_fit(
    freq: &FrequencyTable,
    method: Method,
    param_names: Vec<String>,
    theta_hat: Vec<f64>,
    flag: &str,
) -> FitResult {
    let p = param_names.len();
    let vcov = DMatrix::from_element(p, p, f64::NAN);
    FitResult {
        family: Family::Binomial,
        method,
        model: "zib-homogeneous".to_string(),
        param_names,
        params: vec![f64::NAN; p],
        se: vec![f64::NAN; p],
        vcov: vcov_rows(&vcov),
        detection_dim: 1,
        theta_hat,
        psi_hat: None,
        psi_se: None,
        gamma_hat: None,
        detection_columns: None,
        occurrence_columns: None,
        loglik: f64::NAN,
        aic: f64::NAN,
        converged: false,
        boundary: vec![flag.to_string()],
        iterations: 0,
        gradient_norm: f64::NAN,
        cell_probs: None,
        n: freq.n() as usize,
        m_plus: freq.m_plus() as usize,
    }
}

// ---------------------------------------------------------------------------
// Beta-binomial mixture
// ---------------------------------------------------------------------------

/// Fit the beta-mixed zero-inflated binomial. Needs T >= 3 visits so the
/// within-site spread can identify the mixing precision.
pub fn fit_zib_mixture(freq: &FrequencyTable, t: u64, method: Method) -> Result<FitResult> {
    validate_freq(freq, t)?;
    if t < 3 {
        return Err(Error::model(
            "beta-mixed detection needs at least 3 visits to be identifiable",
        ));
    }
    let n = freq.n() as f64;
    let m_plus = freq.m_plus() as f64;
    let tf = t as f64;
    let ln_fact = ln_factorial_table(t);
    let opts = OptimOptions::default();
    let names = vec!["logit_mean_p".to_string(), "log_precision".to_string()];

    let l1 = |w: &[f64]| {
        let (m, s) = beta_params(w);
        let p_plus = 1.0 - beta_binomial_p0(m, s, t);
        if !(p_plus > 0.0) {
            return f64::NEG_INFINITY;
        }
        let ln_p_plus = p_plus.ln();
        let mut ll = 0.0;
        for (k, cnt) in freq.iter().filter(|&(k, _)| k > 0) {
            ll += cnt as f64 * (log_beta_binomial_cell(m, s, t, k, &ln_fact) - ln_p_plus);
        }
        ll
    };

    let m_init = (freq.mean_positive() / tf).clamp(0.05, 0.9);
    let init = [logit(m_init), 0.7f64.ln()];
    let opt1 = maximize(&l1, None, &init, &opts)?;

    // Runaway precision points at the homogeneous submodel; a stalled search
    // partway up that flat ridge does too, so on non-convergence try the
    // frozen refit and keep it when it loses no likelihood.
    let at_cap = opt1.argmax[1].exp() > PRECISION_CAP / 10.0;
    let (theta_c, opt1, frozen) = if at_cap || !opt1.converged {
        let reduced = |w: &[f64]| l1(&[w[0], PRECISION_CAP.ln()]);
        let o = maximize(&reduced, None, &[opt1.argmax[0]], &opts)?;
        if at_cap || o.value >= opt1.value - 1e-6 {
            let expanded = expand_frozen(&o, 1, PRECISION_CAP.ln());
            (expanded.argmax.clone(), expanded, Some(1))
        } else {
            (opt1.argmax.clone(), opt1, None)
        }
    } else {
        (opt1.argmax.clone(), opt1, None)
    };
    let cap_flag = || {
        if frozen.is_some() {
            vec!["precision at homogeneous-limit cap".to_string()]
        } else {
            Vec::new()
        }
    };

    let cells_at = |w: &[f64]| -> Vec<f64> {
        let (m, s) = beta_params(w);
        (0..=t)
            .map(|k| log_beta_binomial_cell(m, s, t, k, &ln_fact).exp())
            .collect()
    };

    match method {
        Method::Cl => {
            let (m, s) = beta_params(&theta_c);
            let cells = cells_at(&theta_c);
            finish_cl_frequency(
                Family::Binomial,
                freq,
                "zib-beta-mixture",
                names,
                theta_c,
                &l1,
                &|w| {
                    let (m, s) = beta_params(w);
                    1.0 - beta_binomial_p0(m, s, t)
                },
                opt1,
                cap_flag(),
                vec![m, s],
                Some(cells),
                frozen,
            )
        }
        Method::Ml => {
            // Start at the two-stage solution: the full likelihood factorizes
            // through it, so the search begins essentially at the optimum.
            let (m_c, s_c) = beta_params(&theta_c);
            let p_plus_c = 1.0 - beta_binomial_p0(m_c, s_c, t);
            let psi_init = (m_plus / (n * p_plus_c)).clamp(1e-6, 1.0 - 1e-6);
            let mut param_names = names;
            param_names.push("logit_psi".into());
            let full = |m: f64, s: f64, psi: f64| {
                let p_plus = 1.0 - beta_binomial_p0(m, s, t);
                let zero_cell = 1.0 - psi * p_plus;
                if !(zero_cell > 0.0) {
                    return f64::NEG_INFINITY;
                }
                let mut ll = freq.count(0) as f64 * zero_cell.ln();
                for (k, cnt) in freq.iter().filter(|&(k, _)| k > 0) {
                    ll += cnt as f64 * (psi.ln() + log_beta_binomial_cell(m, s, t, k, &ln_fact));
                }
                ll
            };
            let mut frozen_ml = frozen.is_some();
            let opt = if frozen_ml {
                let f = |w: &[f64]| {
                    let (m, s) = beta_params(&[w[0], PRECISION_CAP.ln()]);
                    full(m, s, logistic(w[1]))
                };
                let o = maximize(&f, None, &[theta_c[0], logit(psi_init)], &opts)?;
                expand_frozen(&o, 1, PRECISION_CAP.ln())
            } else {
                let f = |w: &[f64]| {
                    let (m, s) = beta_params(&w[..2]);
                    full(m, s, logistic(w[2]))
                };
                let init = [theta_c[0], theta_c[1], logit(psi_init)];
                let o = maximize(&f, None, &init, &opts)?;
                let ml_at_cap = o.argmax[1].exp() > PRECISION_CAP / 10.0;
                if ml_at_cap || !o.converged {
                    let g = |w: &[f64]| {
                        let (m, s) = beta_params(&[w[0], PRECISION_CAP.ln()]);
                        full(m, s, logistic(w[1]))
                    };
                    let o2 = maximize(&g, None, &[o.argmax[0], o.argmax[2]], &opts)?;
                    if ml_at_cap || o2.value >= o.value - 1e-6 {
                        frozen_ml = true;
                        expand_frozen(&o2, 1, PRECISION_CAP.ln())
                    } else {
                        o
                    }
                } else {
                    o
                }
            };
            let (m, s) = beta_params(&opt.argmax[..2]);
            let cells = cells_at(&opt.argmax[..2]);
            let mut fit = finish_ml_frequency(
                Family::Binomial,
                freq,
                opt,
                "zib-beta-mixture",
                param_names,
                2,
                vec![m, s],
                Some(cells),
            );
            if frozen_ml {
                fit.boundary
                    .push("precision at homogeneous-limit cap".to_string());
            }
            Ok(fit)
        }
    }
}

// ---------------------------------------------------------------------------
// Regression models
// ---------------------------------------------------------------------------

/// Fit the zero-inflated binomial regression: logit-linear per-visit
/// detection and constant or logistic presence. Visit counts may vary by
/// site.
pub fn fit_zib_regression(
    dataset: &Dataset,
    detection: &Formula,
    occurrence: &Formula,
    method: Method,
) -> Result<FitResult> {
    if dataset.family() != Family::Binomial {
        return Err(Error::model("fit_zib_regression requires binomial data"));
    }
    let x = design_rows(dataset, detection, CovariateSide::Detection)?;
    let z = design_rows(dataset, occurrence, CovariateSide::Occurrence)?;
    let y: Vec<f64> = dataset.records().iter().map(|r| r.y as f64).collect();
    let t: Vec<f64> = dataset.records().iter().map(|r| r.visits as f64).collect();
    let detected: Vec<bool> = y.iter().map(|&v| v > 0.0).collect();
    let m_plus = detected.iter().filter(|&&d| d).count();
    if m_plus == 0 {
        return Err(Error::model(
            "presence unidentifiable: no site has a detection",
        ));
    }
    let xa: Vec<Vec<f64>> = x
        .iter()
        .zip(&detected)
        .filter(|(_, &d)| d)
        .map(|(r, _)| r.clone())
        .collect();
    if !full_rank(&xa) {
        return Err(Error::model(
            "detection design is rank deficient on the detected sites",
        ));
    }
    if !full_rank(&z) {
        return Err(Error::model("occurrence design is rank deficient"));
    }

    let max_t = dataset.records().iter().map(|r| r.visits).max().unwrap_or(0);
    let ln_fact = ln_factorial_table(max_t.into());
    let ln_choose_y: Vec<f64> = dataset
        .records()
        .iter()
        .map(|r| ln_choose(&ln_fact, r.visits.into(), r.y))
        .collect();

    let ctx = BinRegressionContext {
        x: &x,
        z: &z,
        y: &y,
        t: &t,
        detected: &detected,
        ln_choose_y: &ln_choose_y,
        n: dataset.n(),
        m_plus,
    };
    match method {
        Method::Cl => fit_zib_regression_cl(detection, occurrence, &ctx),
        Method::Ml => fit_zib_regression_ml(detection, occurrence, &ctx),
    }
}

struct BinRegressionContext<'a> {
    x: &'a [Vec<f64>],
    z: &'a [Vec<f64>],
    y: &'a [f64],
    t: &'a [f64],
    detected: &'a [bool],
    ln_choose_y: &'a [f64],
    n: usize,
    m_plus: usize,
}

/// Zero-truncated binomial regression log-likelihood over detected sites.
fn truncated_loglik_bin(ctx: &BinRegressionContext, theta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for i in 0..ctx.n {
        if !ctx.detected[i] {
            continue;
        }
        let eta = dot(&ctx.x[i], theta);
        let p = logistic(eta);
        let pi = pi_binomial(p, ctx.t[i]);
        if !(pi > 0.0) {
            return f64::NEG_INFINITY;
        }
        ll += ctx.y[i] * eta - ctx.t[i] * log1p_exp(eta) + ctx.ln_choose_y[i] - pi.ln();
    }
    ll
}

fn truncated_score_bin(ctx: &BinRegressionContext, theta: &[f64]) -> Vec<f64> {
    let d = theta.len();
    let mut g = vec![0.0; d];
    for i in 0..ctx.n {
        if !ctx.detected[i] {
            continue;
        }
        let p = logistic(dot(&ctx.x[i], theta));
        let pi = pi_binomial(p, ctx.t[i]);
        let w = ctx.y[i] - ctx.t[i] * p / pi;
        for j in 0..d {
            g[j] += w * ctx.x[i][j];
        }
    }
    g
}

fn detection_stage_bin(
    ctx: &BinRegressionContext,
) -> Result<(Vec<f64>, DMatrix<f64>, OptimResult)> {
    let d = ctx.x[0].len();
    // Start from the naive per-visit detection fraction among detected sites.
    let (mut ys, mut ts) = (0.0, 0.0);
    for i in 0..ctx.n {
        if ctx.detected[i] {
            ys += ctx.y[i];
            ts += ctx.t[i];
        }
    }
    let p0 = (ys / ts).clamp(0.05, 0.95);
    let mut init = vec![0.0; d];
    init[0] = logit(p0);
    let f = |w: &[f64]| truncated_loglik_bin(ctx, w);
    let g = |w: &[f64]| truncated_score_bin(ctx, w);
    let opt = maximize(&f, Some(&g), &init, &OptimOptions::default())?;
    let (v_theta, _) = sym_inverse(&-opt.hessian.clone())?;
    Ok((opt.argmax.clone(), v_theta, opt))
}

fn fit_zib_regression_cl(
    detection: &Formula,
    occurrence: &Formula,
    ctx: &BinRegressionContext,
) -> Result<FitResult> {
    let (theta_c, v_theta, opt1) = detection_stage_bin(ctx)?;
    let d = theta_c.len();
    let ps: Vec<f64> = ctx.x.iter().map(|xi| logistic(dot(xi, &theta_c))).collect();
    let pis: Vec<f64> = ps
        .iter()
        .zip(ctx.t)
        .map(|(&p, &t)| pi_binomial(p, t))
        .collect();
    // d pi_i/d theta_j = T_i p_i (1-p_i)^{T_i} x_ij = T_i p_i (1-pi_i) x_ij.
    let dpi_rows: Vec<Vec<f64>> = (0..ctx.n)
        .map(|i| {
            let s = ctx.t[i] * ps[i] * (1.0 - pis[i]);
            ctx.x[i].iter().map(|&xij| s * xij).collect()
        })
        .collect();

    let mut param_names = theta_param_names_bin(detection);
    let mut boundary = Vec::new();

    if occurrence.intercept_only() {
        let cp =
            constant_presence_stage(ctx.m_plus as f64, ctx.detected, &pis, &dpi_rows, &v_theta);
        if cp.at_one {
            boundary.push("presence estimate at one".to_string());
        }
        let (vcov, w_psi) = constant_presence_vcov(&v_theta, &cp);
        param_names.push("logit_psi".into());
        let mut params = theta_c.clone();
        params.push(w_psi);
        Ok(FitResult {
            family: Family::Binomial,
            method: Method::Cl,
            model: "zib-regression".to_string(),
            param_names,
            params,
            se: se_from_vcov(&vcov),
            vcov: vcov_rows(&vcov),
            detection_dim: d,
            theta_hat: theta_c,
            psi_hat: Some(cp.psi),
            psi_se: Some(cp.var_psi.max(0.0).sqrt()),
            gamma_hat: None,
            detection_columns: Some(detection.columns().to_vec()),
            occurrence_columns: None,
            loglik: opt1.value,
            aic: 2.0 * (d + 1) as f64 - 2.0 * opt1.value,
            converged: opt1.converged,
            boundary,
            iterations: opt1.iterations,
            gradient_norm: opt1.gradient_norm,
            cell_probs: None,
            n: ctx.n,
            m_plus: ctx.m_plus,
        })
    } else {
        let psi0 = (ctx.m_plus as f64 / ctx.n as f64).clamp(1e-6, 1.0 - 1e-6);
        let pp = profile_presence_stage(ctx.z, ctx.detected, &pis, &dpi_rows, &v_theta, psi0)?;
        if pp.gamma.iter().any(|g| g.abs() > 15.0) {
            boundary.push("occurrence coefficients diverging (possible separation)".to_string());
        }
        let vcov = block_vcov(&v_theta, &pp.cross, &pp.v_gamma);
        param_names.extend(gamma_param_names_bin(occurrence));
        let mut params = theta_c.clone();
        params.extend_from_slice(&pp.gamma);
        let converged = opt1.converged && pp.opt.converged;
        Ok(FitResult {
            family: Family::Binomial,
            method: Method::Cl,
            model: "zib-regression".to_string(),
            param_names,
            params,
            se: se_from_vcov(&vcov),
            vcov: vcov_rows(&vcov),
            detection_dim: d,
            theta_hat: theta_c,
            psi_hat: None,
            psi_se: None,
            gamma_hat: Some(pp.gamma),
            detection_columns: Some(detection.columns().to_vec()),
            occurrence_columns: Some(occurrence.columns().to_vec()),
            loglik: opt1.value,
            aic: 2.0 * vcov.nrows() as f64 - 2.0 * opt1.value,
            converged,
            boundary,
            iterations: opt1.iterations + pp.opt.iterations,
            gradient_norm: opt1.gradient_norm.max(pp.opt.gradient_norm),
            cell_probs: None,
            n: ctx.n,
            m_plus: ctx.m_plus,
        })
    }
}

fn zib_ml_loglik(ctx: &BinRegressionContext, d: usize, w: &[f64]) -> f64 {
    let theta = &w[..d];
    let occ = &w[d..];
    let mut ll = 0.0;
    for i in 0..ctx.n {
        let eta = dot(&ctx.x[i], theta);
        let psi = logistic(if occ.len() == 1 {
            occ[0]
        } else {
            dot(&ctx.z[i], occ)
        });
        if ctx.detected[i] {
            if psi <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += psi.ln() + ctx.y[i] * eta - ctx.t[i] * log1p_exp(eta) + ctx.ln_choose_y[i];
        } else {
            let pi = pi_binomial(logistic(eta), ctx.t[i]);
            let cell = 1.0 - psi * pi;
            if cell <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += cell.ln();
        }
    }
    ll
}

fn zib_ml_score(ctx: &BinRegressionContext, d: usize, w: &[f64]) -> Vec<f64> {
    let theta = &w[..d];
    let occ = &w[d..];
    let q = occ.len();
    let mut g = vec![0.0; d + q];
    for i in 0..ctx.n {
        let p = logistic(dot(&ctx.x[i], theta));
        let psi = logistic(if q == 1 { occ[0] } else { dot(&ctx.z[i], occ) });
        if ctx.detected[i] {
            for j in 0..d {
                g[j] += (ctx.y[i] - ctx.t[i] * p) * ctx.x[i][j];
            }
            let w_occ = 1.0 - psi;
            if q == 1 {
                g[d] += w_occ;
            } else {
                for j in 0..q {
                    g[d + j] += w_occ * ctx.z[i][j];
                }
            }
        } else {
            let pi = pi_binomial(p, ctx.t[i]);
            let denom = 1.0 - psi * pi;
            let w_det = -psi * ctx.t[i] * p * (1.0 - pi) / denom;
            for j in 0..d {
                g[j] += w_det * ctx.x[i][j];
            }
            let w_occ = -psi * (1.0 - psi) * pi / denom;
            if q == 1 {
                g[d] += w_occ;
            } else {
                for j in 0..q {
                    g[d + j] += w_occ * ctx.z[i][j];
                }
            }
        }
    }
    g
}

fn fit_zib_regression_ml(
    detection: &Formula,
    occurrence: &Formula,
    ctx: &BinRegressionContext,
) -> Result<FitResult> {
    let d = ctx.x[0].len();
    let (theta_c, _, _) = detection_stage_bin(ctx)?;
    let q = if occurrence.intercept_only() {
        1
    } else {
        ctx.z[0].len()
    };
    let mut init = theta_c;
    init.push(logit(
        (ctx.m_plus as f64 / ctx.n as f64).clamp(1e-6, 1.0 - 1e-6),
    ));
    init.extend(std::iter::repeat(0.0).take(q - 1));

    let f = |w: &[f64]| zib_ml_loglik(ctx, d, w);
    let g = |w: &[f64]| zib_ml_score(ctx, d, w);
    let opt = maximize(&f, Some(&g), &init, &OptimOptions::default())?;
    let p = d + q;
    let (vcov, _) = sym_inverse(&-opt.hessian.clone())
        .unwrap_or_else(|_| (DMatrix::from_element(p, p, f64::NAN), true));

    let mut boundary = Vec::new();
    let mut param_names = theta_param_names_bin(detection);
    let theta_hat = opt.argmax[..d].to_vec();
    let (psi_hat, psi_se, gamma_hat, occurrence_columns) = if occurrence.intercept_only() {
        let eta = opt.argmax[d];
        let psi = logistic(eta);
        let jac = psi * (1.0 - psi);
        if eta.abs() > 30.0 {
            boundary.push("presence estimate at boundary".to_string());
        }
        param_names.push("logit_psi".into());
        (
            Some(psi),
            Some((vcov[(d, d)] * jac * jac).max(0.0).sqrt()),
            None,
            None,
        )
    } else {
        let gamma = opt.argmax[d..].to_vec();
        if gamma.iter().any(|g| g.abs() > 15.0) {
            boundary.push("occurrence coefficients diverging (possible separation)".to_string());
        }
        param_names.extend(gamma_param_names_bin(occurrence));
        (None, None, Some(gamma), Some(occurrence.columns().to_vec()))
    };

    Ok(FitResult {
        family: Family::Binomial,
        method: Method::Ml,
        model: "zib-regression".to_string(),
        param_names,
        params: opt.argmax.clone(),
        se: se_from_vcov(&vcov),
        vcov: vcov_rows(&vcov),
        detection_dim: d,
        theta_hat,
        psi_hat,
        psi_se,
        gamma_hat,
        detection_columns: Some(detection.columns().to_vec()),
        occurrence_columns,
        loglik: opt.value,
        aic: 2.0 * p as f64 - 2.0 * opt.value,
        converged: opt.converged,
        boundary,
        iterations: opt.iterations,
        gradient_norm: opt.gradient_norm,
        cell_probs: None,
        n: ctx.n,
        m_plus: ctx.m_plus,
    })
}

fn theta_param_names_bin(detection: &Formula) -> Vec<String> {
    let mut names = vec!["theta_0".to_string()];
    for c in detection.columns() {
        names.push(format!("theta_{c}"));
    }
    names
}

fn gamma_param_names_bin(occurrence: &Formula) -> Vec<String> {
    let mut names = vec!["gamma_0".to_string()];
    for c in occurrence.columns() {
        names.push(format!("gamma_{c}"));
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SiteRecord;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    fn freq(cells: &[(u64, u64)]) -> FrequencyTable {
        let mut m = BTreeMap::new();
        for &(k, c) in cells {
            m.insert(k, c);
        }
        FrequencyTable::from_counts(m).unwrap()
    }

    #[test]
    fn homogeneous_cl_matches_root_oracle() {
        // T=5, counts {0:60, 1:20, 2:12, 3:8}: positives average 1.7, and the
        // truncated-mean equation 5p/(1-(1-p)^5) = 1.7 has root
        // p = 0.26906114959103091 (bisection oracle), giving
        // psi = 40/(100 pi) = 0.50546130575416795.
        let f = freq(&[(0, 60), (1, 20), (2, 12), (3, 8)]);
        let fit = fit_zib_homogeneous(&f, 5, Method::Cl).unwrap();
        assert_abs_diff_eq!(fit.theta_hat[0], 0.26906114959103091, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.psi_hat.unwrap(), 0.50546130575416795, epsilon = 1e-9);
        assert!(fit.converged);
    }

    #[test]
    fn homogeneous_ml_equals_cl() {
        let f = freq(&[(0, 60), (1, 20), (2, 12), (3, 8)]);
        let cl = fit_zib_homogeneous(&f, 5, Method::Cl).unwrap();
        let ml = fit_zib_homogeneous(&f, 5, Method::Ml).unwrap();
        assert!(ml.converged);
        assert_abs_diff_eq!(ml.theta_hat[0], cl.theta_hat[0], epsilon = 1e-6);
        assert_abs_diff_eq!(ml.psi_hat.unwrap(), cl.psi_hat.unwrap(), epsilon = 1e-6);
    }

    #[test]
    fn homogeneous_rejects_counts_beyond_visits() {
        let f = freq(&[(0, 10), (7, 5)]);
        assert!(fit_zib_homogeneous(&f, 5, Method::Cl).is_err());
    }

    #[test]
    fn homogeneous_flags_saturated_detections() {
        let f = freq(&[(0, 50), (5, 50)]);
        let fit = fit_zib_homogeneous(&f, 5, Method::Cl).unwrap();
        assert!(!fit.converged);
        assert!(fit.boundary.iter().any(|b| b.contains("saturated")));
    }

    #[test]
    fn beta_binomial_uniform_case() {
        // T=3 with a flat Beta(1,1) mixing density puts mass 1/4 on each cell.
        let ln_fact = ln_factorial_table(3);
        for k in 0..=3 {
            let v = log_beta_binomial_cell(0.5, 2.0, 3, k, &ln_fact).exp();
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_binomial_cells_match_product_form() {
        // T=5, mean 0.3, precision 2 (Beta(0.6, 1.4)): p0 = 11781/31250 and
        // p2 = 0.15232, both exact in rational arithmetic.
        let ln_fact = ln_factorial_table(5);
        assert_abs_diff_eq!(beta_binomial_p0(0.3, 2.0, 5), 0.376992, epsilon = 1e-12);
        assert_abs_diff_eq!(
            log_beta_binomial_cell(0.3, 2.0, 5, 0, &ln_fact).exp(),
            0.376992,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            log_beta_binomial_cell(0.3, 2.0, 5, 2, &ln_fact).exp(),
            0.15232,
            epsilon = 1e-12
        );
        let total: f64 = (0..=5)
            .map(|k| log_beta_binomial_cell(0.3, 2.0, 5, k, &ln_fact).exp())
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn beta_binomial_binomial_limit() {
        let ln_fact = ln_factorial_table(5);
        let v = log_beta_binomial_cell(0.3, 1e8, 5, 0, &ln_fact).exp();
        assert_abs_diff_eq!(v, 0.7f64.powi(5), epsilon = 1e-6);
    }

    #[test]
    fn mixture_requires_three_visits() {
        let f = freq(&[(0, 50), (1, 30), (2, 20)]);
        assert!(fit_zib_mixture(&f, 2, Method::Cl).is_err());
    }

    #[test]
    fn mixture_on_underdispersed_data_hits_precision_cap() {
        // Detected counts concentrated on 2 and 3 are underdispersed relative
        // to any binomial, so the beta precision runs away and must be capped.
        let f = freq(&[(0, 500), (2, 300), (3, 200)]);
        let hom = fit_zib_homogeneous(&f, 5, Method::Cl).unwrap();
        let mix = fit_zib_mixture(&f, 5, Method::Cl).unwrap();
        assert!(
            mix.boundary.iter().any(|b| b.contains("precision")),
            "boundary = {:?}",
            mix.boundary
        );
        assert_abs_diff_eq!(mix.theta_hat[0], hom.theta_hat[0], epsilon = 1e-3);
        assert_abs_diff_eq!(mix.psi_hat.unwrap(), hom.psi_hat.unwrap(), epsilon = 1e-3);
    }

    #[test]
    fn mixture_cl_psi_identity_is_exact() {
        let f = freq(&[(0, 300), (1, 110), (2, 40), (3, 30), (4, 15), (5, 5)]);
        let fit = fit_zib_mixture(&f, 5, Method::Cl).unwrap();
        let p_plus = 1.0 - beta_binomial_p0(fit.theta_hat[0], fit.theta_hat[1], 5);
        let reconstructed = fit.psi_hat.unwrap() * f.n() as f64 * p_plus;
        assert!(
            (reconstructed - f.m_plus() as f64).abs() <= 8.0 * f64::EPSILON * f.m_plus() as f64
        );
    }

    fn toy_bin_dataset() -> Dataset {
        let ys = [0u64, 2, 0, 1, 4, 0, 3, 1, 0, 2, 5, 0];
        let xs = [-1.2, -0.8, -0.4, -0.2, 0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3];
        let records: Vec<SiteRecord> = ys
            .iter()
            .zip(&xs)
            .enumerate()
            .map(|(i, (&y, &x))| SiteRecord {
                site_id: format!("s{i}"),
                y,
                visits: 5,
                x: vec![1.0, x],
                z: vec![1.0, x],
            })
            .collect();
        Dataset::new(
            records,
            Family::Binomial,
            vec!["x1".into()],
            vec!["x1".into()],
        )
        .unwrap()
    }

    #[test]
    fn regression_constant_only_matches_homogeneous() {
        let ds = toy_bin_dataset();
        let freq = crate::data::aggregate(&ds);
        for method in [Method::Cl, Method::Ml] {
            let hom = fit_zib_homogeneous(&freq, 5, method).unwrap();
            let reg =
                fit_zib_regression(&ds, &Formula::intercept(), &Formula::intercept(), method)
                    .unwrap();
            assert_abs_diff_eq!(
                logistic(reg.theta_hat[0]),
                hom.theta_hat[0],
                epsilon = 1e-6
            );
            assert_abs_diff_eq!(reg.psi_hat.unwrap(), hom.psi_hat.unwrap(), epsilon = 1e-6);
        }
    }

    #[test]
    fn regression_ml_score_vanishes() {
        let ds = toy_bin_dataset();
        let det = Formula::from_columns(vec!["x1".into()]);
        let occ = Formula::from_columns(vec!["x1".into()]);
        let fit = fit_zib_regression(&ds, &det, &occ, Method::Ml).unwrap();
        assert!(fit.converged);
        assert!(fit.gradient_norm < 1e-6);
    }

    #[test]
    fn regression_cl_detection_score_vanishes() {
        let ds = toy_bin_dataset();
        let det = Formula::from_columns(vec!["x1".into()]);
        let fit = fit_zib_regression(&ds, &det, &Formula::intercept(), Method::Cl).unwrap();
        assert!(fit.converged);
        // Recompute the truncated score at the fitted detection parameters.
        let x = design_rows(&ds, &det, CovariateSide::Detection).unwrap();
        let mut score = vec![0.0; 2];
        for (i, r) in ds.records().iter().enumerate() {
            if r.y == 0 {
                continue;
            }
            let p = logistic(dot(&x[i], &fit.theta_hat));
            let pi = pi_binomial(p, r.visits as f64);
            let w = r.y as f64 - r.visits as f64 * p / pi;
            for j in 0..2 {
                score[j] += w * x[i][j];
            }
        }
        for v in score {
            assert!(v.abs() < 1e-6, "truncated score {v}");
        }
    }
}
