//! Zero-inflated Poisson (abundance) fitters: homogeneous, mixture-detection,
//! and regression models, by full ML and by two-stage conditional likelihood.
//!
//! The conditional-likelihood (CL) route fits the detection parameters on the
//! zero-truncated likelihood of the detected sites A = {i : y_i > 0}, then
//! recovers the presence component: a closed form m_+/(n p_+) for
//! covariate-free models, a scalar root equation for constant presence with
//! detection covariates, and a profile likelihood for occurrence regressions.

use nalgebra::DMatrix;

use crate::data::{Dataset, Family, FrequencyTable};
use crate::error::{Error, Result};
use crate::fit::{se_from_vcov, vcov_rows, FitResult, Method};
use crate::model::{design_rows, full_rank, logistic, logit, CovariateSide, Formula};
use crate::optim::{find_root, maximize, sym_inverse, OptimOptions, OptimResult};
use crate::twostage::{
    block_vcov, constant_presence_stage, constant_presence_vcov, dot, expand_frozen,
    finish_cl_frequency, finish_ml_frequency, profile_presence_stage,
};

/// Dispersion value treated as the homogeneous (pure Poisson) limit of the
/// gamma mixture; beyond it the cell probabilities are Poisson to ~1e-8.
pub const KAPPA_CAP: f64 = 1e8;

/// Mixture family selector for [`fit_zip_mixture`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureKind {
    /// Gamma-distributed rates; marginal counts are negative binomial.
    Gamma,
    /// Finite mixture of Poisson rates with the given component count.
    Finite(usize),
}

/// A parameterized mixing distribution for the detection rate.
#[derive(Debug, Clone, PartialEq)]
pub enum MixtureSpec {
    /// Gamma mixing with mean `mu` and dispersion `kappa` (variance mu^2/kappa).
    Gamma { mu: f64, kappa: f64 },
    /// Finite mixture with intensities ordered increasing.
    Finite { lambdas: Vec<f64>, weights: Vec<f64> },
}

impl MixtureSpec {
    fn validate(&self) -> Result<()> {
        match self {
            MixtureSpec::Gamma { mu, kappa } => {
                if !(*mu > 0.0) || !(*kappa > 0.0) {
                    return Err(Error::model("gamma mixture requires mu > 0 and kappa > 0"));
                }
            }
            MixtureSpec::Finite { lambdas, weights } => {
                if lambdas.is_empty() || lambdas.len() != weights.len() {
                    return Err(Error::model(
                        "finite mixture needs matching, non-empty intensities and weights",
                    ));
                }
                if lambdas.iter().any(|l| !(*l > 0.0)) {
                    return Err(Error::model("finite mixture intensities must be positive"));
                }
                if lambdas.windows(2).any(|w| w[0] > w[1]) {
                    return Err(Error::model(
                        "finite mixture intensities must be ordered increasing",
                    ));
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-8 {
                    return Err(Error::model(
                        "finite mixture weights must be positive and sum to one",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Marginal count cell probability p_k of the mixed Poisson.
pub fn cell_prob(spec: &MixtureSpec, k: u64) -> Result<f64> {
    spec.validate()?;
    Ok(log_cell_prob(spec, k, &ln_factorial_table(k)).exp())
}

/// log p_k. `ln_fact` must cover index `k`.
fn log_cell_prob(spec: &MixtureSpec, k: u64, ln_fact: &[f64]) -> f64 {
    match spec {
        MixtureSpec::Gamma { mu, kappa } => {
            // Negative binomial with mean mu, dispersion kappa, written as a
            // running product so that huge kappa stays at Poisson precision
            // without ever forming a gamma-function ratio.
            let mut acc = 0.0;
            for j in 0..k {
                acc += ((kappa + j as f64) / (kappa + mu)).ln();
            }
            acc + k as f64 * mu.ln() - kappa * (mu / kappa).ln_1p() - ln_fact[k as usize]
        }
        MixtureSpec::Finite { lambdas, weights } => {
            // log-sum-exp over components of log w_c + k log l_c - l_c.
            let terms: Vec<f64> = lambdas
                .iter()
                .zip(weights)
                .map(|(l, w)| w.ln() + k as f64 * l.ln() - l)
                .collect();
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - ln_fact[k as usize]
        }
    }
}

/// Probability of at least one detection under the mixture.
fn positive_prob(spec: &MixtureSpec) -> f64 {
    let p0 = match spec {
        MixtureSpec::Gamma { mu, kappa } => (-kappa * (mu / kappa).ln_1p()).exp(),
        MixtureSpec::Finite { lambdas, weights } => lambdas
            .iter()
            .zip(weights)
            .map(|(l, w)| w * (-l).exp())
            .sum(),
    };
    1.0 - p0
}

pub(crate) fn ln_factorial_table(max_k: u64) -> Vec<f64> {
    let mut t = Vec::with_capacity(max_k as usize + 1);
    t.push(0.0);
    let mut acc = 0.0;
    for k in 1..=max_k {
        acc += (k as f64).ln();
        t.push(acc);
    }
    t
}

// ---------------------------------------------------------------------------
// Homogeneous model
// ---------------------------------------------------------------------------

/// Fit the single-rate zero-inflated Poisson to a count frequency table.
pub fn fit_zip_homogeneous(freq: &FrequencyTable, method: Method) -> Result<FitResult> {
    if freq.m_plus() == 0 {
        return Err(Error::model(
            "presence unidentifiable: no site has a positive count",
        ));
    }
    let n = freq.n() as f64;
    let m_plus = freq.m_plus() as f64;
    let ln_fact = ln_factorial_table(freq.max_count());
    let mean_pos = freq.mean_positive();

    if mean_pos <= 1.0 + 1e-12 {
        // The zero-truncated mean equation lambda / (1 - e^-lambda) = mean has
        // no positive root; the rate collapses to zero.
        return Ok(boundary_fit_homogeneous(freq, method));
    }

    // Detection stage shared by both methods: the truncated-mean root.
    let mean_eq = |l: f64| l / -(-l).exp_m1() - mean_pos;
    let lambda_c = find_root(&mean_eq, (1e-12, mean_pos), 1e-12)?;

    let l1 = |w: &[f64]| {
        let lambda = w[0].exp();
        let lnpi = (-(-lambda).exp_m1()).ln();
        let mut ll = 0.0;
        for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
            ll += m as f64 * (k as f64 * w[0] - lambda - lnpi - ln_fact[k as usize]);
        }
        ll
    };

    match method {
        Method::Cl => {
            let theta_c = vec![lambda_c.ln()];
            let opt1 = OptimResult {
                argmax: theta_c.clone(),
                value: l1(&theta_c),
                gradient_norm: mean_eq(lambda_c).abs(),
                hessian: DMatrix::zeros(1, 1),
                converged: true,
                hessian_negative_definite: true,
                iterations: 0,
            };
            let cells = cell_probs_for(&single_rate(lambda_c), freq.max_count());
            finish_cl_frequency(
                Family::Poisson,
                freq,
                "zip-homogeneous",
                vec!["log_lambda".into()],
                theta_c,
                &l1,
                &|w| positive_prob(&single_rate(w[0].exp())),
                opt1,
                Vec::new(),
                vec![lambda_c],
                Some(cells),
                None,
            )
        }
        Method::Ml => {
            let loglik_full = |w: &[f64]| {
                let (lambda, psi) = (w[0].exp(), logistic(w[1]));
                let pi = -(-lambda).exp_m1();
                let mut ll = freq.count(0) as f64 * (1.0 - psi * pi).ln();
                for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
                    ll += m as f64 * (psi.ln() + k as f64 * w[0] - lambda - ln_fact[k as usize]);
                }
                ll
            };
            let grad = |w: &[f64]| {
                let (lambda, psi) = (w[0].exp(), logistic(w[1]));
                let pi = -(-lambda).exp_m1();
                let m0 = freq.count(0) as f64;
                let denom = 1.0 - psi * pi;
                let mut d_loglam = -m0 * psi * (-lambda).exp() * lambda / denom;
                for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
                    d_loglam += m as f64 * (k as f64 - lambda);
                }
                let d_eta = m_plus * (1.0 - psi) - m0 * psi * (1.0 - psi) * pi / denom;
                vec![d_loglam, d_eta]
            };
            let pi_c = -(-lambda_c).exp_m1();
            let psi_c = (m_plus / (n * pi_c)).clamp(1e-6, 1.0 - 1e-6);
            let init = [lambda_c.ln(), logit(psi_c)];
            let opt = maximize(&loglik_full, Some(&grad), &init, &OptimOptions::default())?;
            let lambda_hat = opt.argmax[0].exp();
            let cells = cell_probs_for(&single_rate(lambda_hat), freq.max_count());
            Ok(finish_ml_frequency(
                Family::Poisson,
                freq,
                opt,
                "zip-homogeneous",
                vec!["log_lambda".into(), "logit_psi".into()],
                1,
                vec![lambda_hat],
                Some(cells),
            ))
        }
    }
}

fn single_rate(lambda: f64) -> MixtureSpec {
    MixtureSpec::Finite {
        lambdas: vec![lambda],
        weights: vec![1.0],
    }
}

/// Degenerate fit when the positive-count mean is at or below one.
fn boundary_fit_homogeneous(freq: &FrequencyTable, method: Method) -> FitResult {
    let p = 2;
    let vcov = DMatrix::from_element(p, p, f64::NAN);
    FitResult {
        family: Family::Poisson,
        method,
        model: "zip-homogeneous".to_string(),
        param_names: vec!["log_lambda".into(), "logit_psi".into()],
        params: vec![f64::NAN, f64::NAN],
        se: vec![f64::NAN, f64::NAN],
        vcov: vcov_rows(&vcov),
        detection_dim: 1,
        theta_hat: vec![0.0],
        psi_hat: None,
        psi_se: None,
        gamma_hat: None,
        detection_columns: None,
        occurrence_columns: None,
        loglik: f64::NAN,
        aic: f64::NAN,
        converged: false,
        boundary: vec!["positive-count mean at or below one: rate at zero boundary".to_string()],
        iterations: 0,
        gradient_norm: f64::NAN,
        cell_probs: None,
        n: freq.n() as usize,
        m_plus: freq.m_plus() as usize,
    }
}

fn cell_probs_for(spec: &MixtureSpec, max_k: u64) -> Vec<f64> {
    let ln_fact = ln_factorial_table(max_k);
    (0..=max_k)
        .map(|k| log_cell_prob(spec, k, &ln_fact).exp())
        .collect()
}

// ---------------------------------------------------------------------------
// Mixture models
// ---------------------------------------------------------------------------

/// Fit a mixed-rate zero-inflated Poisson to a count frequency table.
pub fn fit_zip_mixture(
    freq: &FrequencyTable,
    kind: MixtureKind,
    method: Method,
) -> Result<FitResult> {
    if freq.m_plus() == 0 {
        return Err(Error::model(
            "presence unidentifiable: no site has a positive count",
        ));
    }
    match kind {
        MixtureKind::Gamma => fit_gamma_mixture(freq, method),
        MixtureKind::Finite(c) => {
            if c == 0 {
                return Err(Error::model("finite mixture needs at least one component"));
            }
            fit_finite_mixture(freq, c, method)
        }
    }
}

/// Working parameters (log mu, log kappa) -> mixture spec.
fn gamma_spec(w: &[f64]) -> MixtureSpec {
    MixtureSpec::Gamma {
        mu: w[0].exp(),
        kappa: w[1].exp().min(KAPPA_CAP),
    }
}

/// Working parameters (t_1..t_C, s_2..s_C) -> ordered finite mixture.
fn finite_spec(w: &[f64], c: usize) -> MixtureSpec {
    let mut lambdas = Vec::with_capacity(c);
    let mut acc = 0.0;
    for t in &w[..c] {
        acc += t.exp();
        lambdas.push(acc);
    }
    // Softmax with the first logit pinned at zero.
    let mut raw = Vec::with_capacity(c);
    raw.push(0.0);
    raw.extend_from_slice(&w[c..2 * c - 1]);
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights = exps.iter().map(|e| e / total).collect();
    MixtureSpec::Finite { lambdas, weights }
}

fn mixture_loglik_truncated(freq: &FrequencyTable, spec: &MixtureSpec, ln_fact: &[f64]) -> f64 {
    let p_plus = positive_prob(spec);
    if !(p_plus > 0.0) {
        return f64::NEG_INFINITY;
    }
    let ln_p_plus = p_plus.ln();
    let mut ll = 0.0;
    for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
        ll += m as f64 * (log_cell_prob(spec, k, ln_fact) - ln_p_plus);
    }
    ll
}

fn mixture_loglik_full(
    freq: &FrequencyTable,
    spec: &MixtureSpec,
    psi: f64,
    ln_fact: &[f64],
) -> f64 {
    let p_plus = positive_prob(spec);
    let zero_cell = 1.0 - psi * p_plus;
    if !(zero_cell > 0.0) {
        return f64::NEG_INFINITY;
    }
    let mut ll = freq.count(0) as f64 * zero_cell.ln();
    for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
        ll += m as f64 * (psi.ln() + log_cell_prob(spec, k, ln_fact));
    }
    ll
}

/// Moment-based starting values for the gamma mixture on the positives.
fn gamma_init(freq: &FrequencyTable) -> [f64; 2] {
    let m_plus = freq.m_plus() as f64;
    let mean = freq.mean_positive();
    let mut var = 0.0;
    for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
        var += m as f64 * (k as f64 - mean).powi(2);
    }
    var /= m_plus.max(2.0) - 1.0;
    let mu0 = (mean - 1.0).max(0.2);
    let excess = (var - mean).max(1e-3);
    let kappa0 = (mu0 * mu0 / excess).clamp(0.05, 50.0);
    [mu0.ln(), kappa0.ln()]
}

fn fit_gamma_mixture(freq: &FrequencyTable, method: Method) -> Result<FitResult> {
    let ln_fact = ln_factorial_table(freq.max_count());
    let n = freq.n() as f64;
    let m_plus = freq.m_plus() as f64;
    let opts = OptimOptions::default();
    let names = vec!["log_mu".to_string(), "log_kappa".to_string()];

    let l1 = |w: &[f64]| mixture_loglik_truncated(freq, &gamma_spec(w), &ln_fact);
    let opt1 = maximize(&l1, None, &gamma_init(freq), &opts)?;

    // Dispersion running away means the data want the pure-Poisson submodel:
    // refit with the dispersion frozen at the cap and flag the boundary. A
    // stalled search partway up that flat ridge looks like plain
    // non-convergence, so on failure try the frozen submodel too and keep it
    // when it loses no likelihood.
    let at_cap = opt1.argmax[1].exp() > KAPPA_CAP / 10.0;
    let (theta_c, opt1, frozen) = if at_cap || !opt1.converged {
        let reduced = |w: &[f64]| l1(&[w[0], KAPPA_CAP.ln()]);
        let o = maximize(&reduced, None, &[opt1.argmax[0]], &opts)?;
        if at_cap || o.value >= opt1.value - 1e-6 {
            let expanded = expand_frozen(&o, 1, KAPPA_CAP.ln());
            (expanded.argmax.clone(), expanded, Some(1))
        } else {
            (opt1.argmax.clone(), opt1, None)
        }
    } else {
        (opt1.argmax.clone(), opt1, None)
    };
    let cap_flag = || {
        if frozen.is_some() {
            vec!["dispersion at homogeneous-limit cap".to_string()]
        } else {
            Vec::new()
        }
    };

    match method {
        Method::Cl => {
            let spec = gamma_spec(&theta_c);
            let MixtureSpec::Gamma { mu, kappa } = spec.clone() else {
                unreachable!()
            };
            let cells = cell_probs_for(&spec, freq.max_count());
            finish_cl_frequency(
                Family::Poisson,
                freq,
                "zip-gamma-mixture",
                names,
                theta_c,
                &l1,
                &|w| positive_prob(&gamma_spec(w)),
                opt1,
                cap_flag(),
                vec![mu, kappa],
                Some(cells),
                frozen,
            )
        }
        Method::Ml => {
            // Start at the two-stage solution: the full likelihood factorizes
            // through it, so the search begins essentially at the optimum and
            // the two methods tie to machine precision.
            let p_plus_c = positive_prob(&gamma_spec(&theta_c));
            let psi_init = (m_plus / (n * p_plus_c)).clamp(1e-6, 1.0 - 1e-6);
            let mut param_names = names;
            param_names.push("logit_psi".into());
            // The full fit can also drive the dispersion to the cap, so check
            // the boundary again after maximizing.
            let mut frozen_ml = frozen.is_some();
            let opt = if frozen_ml {
                let f = |w: &[f64]| {
                    mixture_loglik_full(
                        freq,
                        &gamma_spec(&[w[0], KAPPA_CAP.ln()]),
                        logistic(w[1]),
                        &ln_fact,
                    )
                };
                let o = maximize(&f, None, &[theta_c[0], logit(psi_init)], &opts)?;
                expand_frozen(&o, 1, KAPPA_CAP.ln())
            } else {
                let f = |w: &[f64]| {
                    mixture_loglik_full(freq, &gamma_spec(&w[..2]), logistic(w[2]), &ln_fact)
                };
                let init = [theta_c[0], theta_c[1], logit(psi_init)];
                let o = maximize(&f, None, &init, &opts)?;
                let ml_at_cap = o.argmax[1].exp() > KAPPA_CAP / 10.0;
                if ml_at_cap || !o.converged {
                    let g = |w: &[f64]| {
                        mixture_loglik_full(
                            freq,
                            &gamma_spec(&[w[0], KAPPA_CAP.ln()]),
                            logistic(w[1]),
                            &ln_fact,
                        )
                    };
                    let o2 = maximize(&g, None, &[o.argmax[0], o.argmax[2]], &opts)?;
                    if ml_at_cap || o2.value >= o.value - 1e-6 {
                        frozen_ml = true;
                        expand_frozen(&o2, 1, KAPPA_CAP.ln())
                    } else {
                        o
                    }
                } else {
                    o
                }
            };
            let spec = gamma_spec(&opt.argmax[..2]);
            let MixtureSpec::Gamma { mu, kappa } = spec.clone() else {
                unreachable!()
            };
            let cells = cell_probs_for(&spec, freq.max_count());
            let mut fit = finish_ml_frequency(
                Family::Poisson,
                freq,
                opt,
                "zip-gamma-mixture",
                param_names,
                2,
                vec![mu, kappa],
                Some(cells),
            );
            if frozen_ml {
                fit.boundary
                    .push("dispersion at homogeneous-limit cap".to_string());
            }
            Ok(fit)
        }
    }
}

fn fit_finite_mixture(freq: &FrequencyTable, c: usize, method: Method) -> Result<FitResult> {
    let ln_fact = ln_factorial_table(freq.max_count());
    let n = freq.n() as f64;
    let m_plus = freq.m_plus() as f64;
    let opts = OptimOptions::default();

    // Starting intensities from quantiles of the positive counts.
    let mut pos_values = Vec::new();
    for (k, m) in freq.iter().filter(|&(k, _)| k > 0) {
        for _ in 0..m {
            pos_values.push(k as f64);
        }
    }
    pos_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let idx = ((pos_values.len() as f64 - 1.0) * q).round() as usize;
        pos_values[idx]
    };
    let mut init = Vec::with_capacity(2 * c - 1);
    let mut prev = 0.0;
    for ci in 0..c {
        let q = (ci as f64 + 0.5) / c as f64;
        let lam = quantile(q).max(prev + 0.25);
        init.push((lam - prev).max(0.1).ln());
        prev = lam;
    }
    init.extend(std::iter::repeat(0.0).take(c - 1));

    let l1 = |w: &[f64]| mixture_loglik_truncated(freq, &finite_spec(w, c), &ln_fact);
    let opt1 = maximize(&l1, None, &init, &opts)?;
    let theta_c = opt1.argmax.clone();

    let mut theta_names = Vec::new();
    for ci in 0..c {
        theta_names.push(format!("log_dlambda{}", ci + 1));
    }
    for ci in 1..c {
        theta_names.push(format!("weight_logit{}", ci + 1));
    }

    let natural = |w: &[f64]| -> Vec<f64> {
        let MixtureSpec::Finite { lambdas, weights } = finite_spec(w, c) else {
            unreachable!()
        };
        lambdas.into_iter().chain(weights).collect()
    };

    match method {
        Method::Cl => {
            let cells = cell_probs_for(&finite_spec(&theta_c, c), freq.max_count());
            let nat = natural(&theta_c);
            finish_cl_frequency(
                Family::Poisson,
                freq,
                "zip-finite-mixture",
                theta_names,
                theta_c,
                &l1,
                &|w| positive_prob(&finite_spec(w, c)),
                opt1,
                Vec::new(),
                nat,
                Some(cells),
                None,
            )
        }
        Method::Ml => {
            let f = |w: &[f64]| {
                mixture_loglik_full(
                    freq,
                    &finite_spec(&w[..2 * c - 1], c),
                    logistic(w[2 * c - 1]),
                    &ln_fact,
                )
            };
            // Start at the two-stage solution (see the gamma-mixture fit).
            let p_plus_c = positive_prob(&finite_spec(&theta_c, c));
            let psi_init = (m_plus / (n * p_plus_c)).clamp(1e-6, 1.0 - 1e-6);
            let mut w0 = theta_c.clone();
            w0.push(logit(psi_init));
            let o = maximize(&f, None, &w0, &opts)?;
            let mut names = theta_names;
            names.push("logit_psi".into());
            let cells = cell_probs_for(&finite_spec(&o.argmax[..2 * c - 1], c), freq.max_count());
            let nat = natural(&o.argmax[..2 * c - 1]);
            Ok(finish_ml_frequency(
                Family::Poisson,
                freq,
                o,
                "zip-finite-mixture",
                names,
                2 * c - 1,
                nat,
                Some(cells),
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Regression models
// ---------------------------------------------------------------------------

/// Fit the zero-inflated Poisson regression: log-linear detection intensity
/// and constant or logistic presence.
pub fn fit_zip_regression(
    dataset: &Dataset,
    detection: &Formula,
    occurrence: &Formula,
    method: Method,
) -> Result<FitResult> {
    if dataset.family() != Family::Poisson {
        return Err(Error::model("fit_zip_regression requires Poisson data"));
    }
    let x = design_rows(dataset, detection, CovariateSide::Detection)?;
    let z = design_rows(dataset, occurrence, CovariateSide::Occurrence)?;
    let y: Vec<f64> = dataset.records().iter().map(|r| r.y as f64).collect();
    let detected: Vec<bool> = y.iter().map(|&v| v > 0.0).collect();
    let m_plus = detected.iter().filter(|&&d| d).count();
    if m_plus == 0 {
        return Err(Error::model(
            "presence unidentifiable: no site has a positive count",
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

    let ln_fact = ln_factorial_table(dataset.records().iter().map(|r| r.y).max().unwrap_or(0));
    let ln_fact_y: Vec<f64> = dataset
        .records()
        .iter()
        .map(|r| ln_fact[r.y as usize])
        .collect();

    let ctx = RegressionContext {
        x: &x,
        z: &z,
        y: &y,
        detected: &detected,
        ln_fact_y: &ln_fact_y,
        n: dataset.n(),
        m_plus,
    };
    match method {
        Method::Cl => fit_zip_regression_cl(detection, occurrence, &ctx),
        Method::Ml => fit_zip_regression_ml(detection, occurrence, &ctx),
    }
}

struct RegressionContext<'a> {
    x: &'a [Vec<f64>],
    z: &'a [Vec<f64>],
    y: &'a [f64],
    detected: &'a [bool],
    ln_fact_y: &'a [f64],
    n: usize,
    m_plus: usize,
}

/// Zero-truncated Poisson regression log-likelihood over detected sites.
fn truncated_loglik(ctx: &RegressionContext, theta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for i in 0..ctx.n {
        if !ctx.detected[i] {
            continue;
        }
        let eta = dot(&ctx.x[i], theta);
        let lambda = eta.exp();
        let pi = -(-lambda).exp_m1();
        if !(pi > 0.0) || !lambda.is_finite() {
            return f64::NEG_INFINITY;
        }
        ll += ctx.y[i] * eta - lambda - pi.ln() - ctx.ln_fact_y[i];
    }
    ll
}

fn truncated_score(ctx: &RegressionContext, theta: &[f64]) -> Vec<f64> {
    let p = theta.len();
    let mut g = vec![0.0; p];
    for i in 0..ctx.n {
        if !ctx.detected[i] {
            continue;
        }
        let lambda = dot(&ctx.x[i], theta).exp();
        let pi = -(-lambda).exp_m1();
        let w = ctx.y[i] - lambda / pi;
        for j in 0..p {
            g[j] += w * ctx.x[i][j];
        }
    }
    g
}

/// Detection-stage CL fit: returns the working estimate, its covariance, and
/// the optimizer trace.
fn detection_stage(ctx: &RegressionContext) -> Result<(Vec<f64>, DMatrix<f64>, OptimResult)> {
    let p = ctx.x[0].len();
    let mean_pos: f64 = ctx
        .y
        .iter()
        .zip(ctx.detected)
        .filter(|(_, &d)| d)
        .map(|(v, _)| v)
        .sum::<f64>()
        / ctx.m_plus as f64;
    let mut init = vec![0.0; p];
    init[0] = mean_pos.max(1.05).ln();
    let f = |w: &[f64]| truncated_loglik(ctx, w);
    let g = |w: &[f64]| truncated_score(ctx, w);
    let opt = maximize(&f, Some(&g), &init, &OptimOptions::default())?;
    let (v_theta, _) = sym_inverse(&-opt.hessian.clone())?;
    Ok((opt.argmax.clone(), v_theta, opt))
}

fn fit_zip_regression_cl(
    detection: &Formula,
    occurrence: &Formula,
    ctx: &RegressionContext,
) -> Result<FitResult> {
    let (theta_c, v_theta, opt1) = detection_stage(ctx)?;
    let d = theta_c.len();
    let lambdas: Vec<f64> = ctx.x.iter().map(|xi| dot(xi, &theta_c).exp()).collect();
    let pis: Vec<f64> = lambdas.iter().map(|&l| -(-l).exp_m1()).collect();
    // d pi_i/d theta_j = e^{-lambda_i} lambda_i x_ij.
    let dpi_rows: Vec<Vec<f64>> = (0..ctx.n)
        .map(|i| {
            let s = (-lambdas[i]).exp() * lambdas[i];
            ctx.x[i].iter().map(|&xij| s * xij).collect()
        })
        .collect();

    let mut param_names = theta_param_names(detection);
    let mut boundary = Vec::new();

    if occurrence.intercept_only() {
        let cp = constant_presence_stage(
            ctx.m_plus as f64,
            ctx.detected,
            &pis,
            &dpi_rows,
            &v_theta,
        );
        if cp.at_one {
            boundary.push("presence estimate at one".to_string());
        }
        let (vcov, w_psi) = constant_presence_vcov(&v_theta, &cp);
        param_names.push("logit_psi".into());
        let mut params = theta_c.clone();
        params.push(w_psi);
        Ok(FitResult {
            family: Family::Poisson,
            method: Method::Cl,
            model: "zip-regression".to_string(),
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
        param_names.extend(gamma_param_names(occurrence));
        let mut params = theta_c.clone();
        params.extend_from_slice(&pp.gamma);
        let converged = opt1.converged && pp.opt.converged;
        Ok(FitResult {
            family: Family::Poisson,
            method: Method::Cl,
            model: "zip-regression".to_string(),
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

/// Joint ML log-likelihood for the ZIP regression; `w` holds the detection
/// coefficients then the occurrence parameters (logit psi or gamma).
fn zip_ml_loglik(ctx: &RegressionContext, d: usize, w: &[f64]) -> f64 {
    let theta = &w[..d];
    let occ = &w[d..];
    let mut ll = 0.0;
    for i in 0..ctx.n {
        let eta = dot(&ctx.x[i], theta);
        let lambda = eta.exp();
        if !lambda.is_finite() {
            return f64::NEG_INFINITY;
        }
        let psi = logistic(if occ.len() == 1 {
            occ[0]
        } else {
            dot(&ctx.z[i], occ)
        });
        if ctx.detected[i] {
            if psi <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += psi.ln() + ctx.y[i] * eta - lambda - ctx.ln_fact_y[i];
        } else {
            let pi = -(-lambda).exp_m1();
            let cell = 1.0 - psi * pi;
            if cell <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += cell.ln();
        }
    }
    ll
}

fn zip_ml_score(ctx: &RegressionContext, d: usize, w: &[f64]) -> Vec<f64> {
    let theta = &w[..d];
    let occ = &w[d..];
    let q = occ.len();
    let mut g = vec![0.0; d + q];
    for i in 0..ctx.n {
        let lambda = dot(&ctx.x[i], theta).exp();
        let psi = logistic(if q == 1 { occ[0] } else { dot(&ctx.z[i], occ) });
        if ctx.detected[i] {
            for j in 0..d {
                g[j] += (ctx.y[i] - lambda) * ctx.x[i][j];
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
            let pi = -(-lambda).exp_m1();
            let denom = 1.0 - psi * pi;
            let w_det = -psi * (-lambda).exp() * lambda / denom;
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

fn fit_zip_regression_ml(
    detection: &Formula,
    occurrence: &Formula,
    ctx: &RegressionContext,
) -> Result<FitResult> {
    let d = ctx.x[0].len();
    // Detection start from the cheap conditional stage, presence from the
    // naive detected fraction.
    let (theta_c, _, _) = detection_stage(ctx)?;
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

    let f = |w: &[f64]| zip_ml_loglik(ctx, d, w);
    let g = |w: &[f64]| zip_ml_score(ctx, d, w);
    let opt = maximize(&f, Some(&g), &init, &OptimOptions::default())?;
    let p = d + q;
    let (vcov, _) = sym_inverse(&-opt.hessian.clone())
        .unwrap_or_else(|_| (DMatrix::from_element(p, p, f64::NAN), true));

    let mut boundary = Vec::new();
    let mut param_names = theta_param_names(detection);
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
        param_names.extend(gamma_param_names(occurrence));
        (None, None, Some(gamma), Some(occurrence.columns().to_vec()))
    };

    Ok(FitResult {
        family: Family::Poisson,
        method: Method::Ml,
        model: "zip-regression".to_string(),
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

fn theta_param_names(detection: &Formula) -> Vec<String> {
    let mut names = vec!["theta_0".to_string()];
    for c in detection.columns() {
        names.push(format!("theta_{c}"));
    }
    names
}

fn gamma_param_names(occurrence: &Formula) -> Vec<String> {
    let mut names = vec!["gamma_0".to_string()];
    for c in occurrence.columns() {
        names.push(format!("gamma_{c}"));
    }
    names
}

// ---------------------------------------------------------------------------
// Estimating-function components
// ---------------------------------------------------------------------------

/// Per-site estimating-function components of a constant-presence regression
/// fit: `g_i = y_i - (lambda_i / pi_i) I_i` and
/// `h_i = (I_i - psi pi_i) / {psi (1 - psi pi_i)}`.
#[derive(Debug, Clone)]
pub struct ScoreComponents {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub pi: Vec<f64>,
    pub detected: Vec<bool>,
    /// Detection-stage score sum `sum_i g_i x_i`; zero at a CL optimum.
    pub sum_g_x: Vec<f64>,
    /// Presence root-equation value `sum_i h_i`; zero at the CL presence root.
    pub sum_h: f64,
}

/// Evaluate the estimating-function components at a fitted constant-presence
/// ZIP regression.
pub fn score_components(fit: &FitResult, dataset: &Dataset) -> Result<ScoreComponents> {
    if fit.family != Family::Poisson {
        return Err(Error::model("score components are defined for Poisson fits"));
    }
    let psi = fit
        .psi_hat
        .ok_or_else(|| Error::model("score components require a constant presence fit"))?;
    let d = fit.detection_dim;
    let theta = &fit.params[..d];
    let columns = fit
        .detection_columns
        .clone()
        .ok_or_else(|| Error::model("score components require a regression fit"))?;
    let formula = Formula::from_columns(columns);
    let x = design_rows(dataset, &formula, CovariateSide::Detection)?;

    let n = dataset.n();
    let mut g = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    let mut pi_all = Vec::with_capacity(n);
    let mut detected = Vec::with_capacity(n);
    let mut sum_g_x = vec![0.0; d];
    let mut sum_h = 0.0;
    for (i, r) in dataset.records().iter().enumerate() {
        let lambda = dot(&x[i], theta).exp();
        let pi = -(-lambda).exp_m1();
        let ind = r.y > 0;
        let gi = r.y as f64 - if ind { lambda / pi } else { 0.0 };
        let hi = ((ind as u8) as f64 - psi * pi) / (psi * (1.0 - psi * pi));
        for j in 0..d {
            sum_g_x[j] += gi * x[i][j];
        }
        sum_h += hi;
        g.push(gi);
        h.push(hi);
        pi_all.push(pi);
        detected.push(ind);
    }
    Ok(ScoreComponents {
        g,
        h,
        pi: pi_all,
        detected,
        sum_g_x,
        sum_h,
    })
}
