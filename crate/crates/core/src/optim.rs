//! Deterministic numerical machinery: Newton-type maximization with
//! step-halving, scalar bisection, and central-difference derivatives.
//!
//! All model parameters are optimized on unconstrained working scales
//! (log rates, logit probabilities, regression coefficients as-is), so no
//! constrained solver is needed. Everything here is a pure function and safe
//! to call from parallel replicate workers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Options for [`maximize`].
#[derive(Debug, Clone)]
pub struct OptimOptions {
    /// Euclidean norm of the gradient below which the search stops.
    pub gradient_tolerance: f64,
    /// Maximum number of Newton iterations.
    pub max_iterations: usize,
    /// Maximum number of step halvings per iteration.
    pub step_halving_max: usize,
    /// Base central-difference step; scaled by `|x| + 1` per coordinate.
    pub finite_difference_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            gradient_tolerance: 1e-8,
            max_iterations: 200,
            step_halving_max: 30,
            finite_difference_step: f64::EPSILON.cbrt(),
        }
    }
}

/// Result of an unconstrained maximization.
#[derive(Debug, Clone)]
pub struct OptimResult {
    /// Maximizer on the working scale.
    pub argmax: Vec<f64>,
    /// Objective value at `argmax`.
    pub value: f64,
    /// Euclidean norm of the gradient at `argmax`.
    pub gradient_norm: f64,
    /// Observed second-derivative matrix at `argmax` (symmetrized).
    pub hessian: DMatrix<f64>,
    /// Whether the gradient tolerance was met.
    pub converged: bool,
    /// Whether the Hessian at the reported point is negative definite.
    pub hessian_negative_definite: bool,
    /// Newton iterations used.
    pub iterations: usize,
}

/// Central-difference gradient with per-coordinate step `h * (|x_j| + 1)`.
pub fn numeric_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], base_step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = base_step * (x[j].abs() + 1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Hessian, symmetrized as `(H + H') / 2`.
///
/// Uses step `eps^(1/4) * (|x_j| + 1)`, which balances truncation against
/// cancellation for log-likelihood-scale objectives; the looser gradient step
/// would lose several digits in the second differences.
pub fn numeric_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let p = x.len();
    let step: Vec<f64> = x
        .iter()
        .map(|&xj| f64::EPSILON.powf(0.25) * (xj.abs() + 1.0))
        .collect();
    let f0 = f(x);
    let mut h = DMatrix::zeros(p, p);
    let mut xt = x.to_vec();
    for i in 0..p {
        // Diagonal: (f(x+h) - 2 f(x) + f(x-h)) / h^2.
        xt[i] = x[i] + step[i];
        let fp = f(&xt);
        xt[i] = x[i] - step[i];
        let fm = f(&xt);
        xt[i] = x[i];
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (step[i] * step[i]);
        for j in (i + 1)..p {
            // Off-diagonal four-point formula.
            xt[i] = x[i] + step[i];
            xt[j] = x[j] + step[j];
            let fpp = f(&xt);
            xt[j] = x[j] - step[j];
            let fpm = f(&xt);
            xt[i] = x[i] - step[i];
            let fmm = f(&xt);
            xt[j] = x[j] + step[j];
            let fmp = f(&xt);
            xt[i] = x[i];
            xt[j] = x[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * step[i] * step[j]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "non-finite value while forming numeric Hessian",
        ));
    }
    Ok(h)
}

/// Whether a symmetric matrix is negative definite (via Cholesky of `-H`).
fn is_negative_definite(h: &DMatrix<f64>) -> bool {
    nalgebra::Cholesky::new(-h.clone()).is_some()
}

/// Maximize `f` by Newton ascent with a numeric Hessian and step-halving.
///
/// The gradient is taken from `gradient` when supplied and from central
/// differences otherwise. When the Newton direction is not an ascent
/// direction (or the Hessian solve fails), the step falls back to the
/// gradient direction. Non-finite trial objective values trigger halving.
/// Everything is deterministic: identical inputs give identical outputs.
pub fn maximize(
    f: &dyn Fn(&[f64]) -> f64,
    gradient: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
    init: &[f64],
    options: &OptimOptions,
) -> Result<OptimResult> {
    let p = init.len();
    let mut x = init.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::numerical(
            "objective not finite at the initial point",
        ));
    }
    let grad_at = |x: &[f64]| -> Vec<f64> {
        match gradient {
            Some(g) => g(x),
            None => numeric_gradient(f, x, options.finite_difference_step),
        }
    };

    let mut g = grad_at(&x);
    let mut iterations = 0;
    let mut converged = norm(&g) <= options.gradient_tolerance;

    while !converged && iterations < options.max_iterations {
        iterations += 1;
        let hess = numeric_hessian(f, &x)?;
        // Plain Newton only when the curvature is proper; an indefinite
        // Hessian gets its eigenvalues flipped and floored instead, which
        // keeps curvature-matched step lengths in every direction. Falling
        // back to the raw gradient here would crawl on ill-conditioned
        // surfaces.
        let direction = if is_negative_definite(&hess) {
            newton_direction(&hess, &g)
        } else {
            None
        };
        let mut dir = match direction {
            Some(d) if dot(&d, &g) > 0.0 => d,
            _ => modified_newton_direction(&hess, &g).unwrap_or_else(|| g.clone()),
        };
        // Guard absurd step lengths from near-singular Hessians.
        let dnorm = norm(&dir);
        if !dnorm.is_finite() || dnorm == 0.0 {
            dir = g.clone();
        } else if dnorm > 1e4 {
            for d in dir.iter_mut() {
                *d *= 1e4 / dnorm;
            }
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=options.step_halving_max {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let ft = f(&trial);
            if ft.is_finite() && ft > fx {
                x = trial;
                fx = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No improving point along the search direction: either we are at
            // a (numerical) stationary point or the surface is pathological.
            // Count it as converged when the gradient already sits at the
            // objective's rounding noise floor, or when the quadratic model
            // predicts an improvement too small to register in the objective
            // (0.5 g'd for the Newton step), which is the stall signature of
            // an optimum whose neighborhood is flat at double precision.
            let predicted = 0.5 * dot(&dir, &g).abs();
            converged = norm(&g) <= f64::EPSILON.sqrt() * (1.0 + fx.abs())
                || predicted <= 32.0 * f64::EPSILON * (1.0 + fx.abs());
            break;
        }
        g = grad_at(&x);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite gradient during search"));
        }
        converged = norm(&g) <= options.gradient_tolerance;
    }

    let hessian = numeric_hessian(f, &x)?;
    let hessian_negative_definite = p > 0 && is_negative_definite(&hessian);
    Ok(OptimResult {
        gradient_norm: norm(&g),
        argmax: x,
        value: fx,
        hessian,
        converged,
        hessian_negative_definite,
        iterations,
    })
}

/// Ascent direction from an eigenvalue-modified Hessian: every eigenvalue is
/// replaced by `-max(|lambda|, floor)`, making the solve negative definite.
/// For a nonzero gradient the result is always an ascent direction, and it
/// keeps the proper Newton scaling in well-curved subspaces.
fn modified_newton_direction(hess: &DMatrix<f64>, g: &[f64]) -> Option<Vec<f64>> {
    let eig = nalgebra::SymmetricEigen::new(hess.clone());
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, &l| m.max(l.abs()));
    if !max_abs.is_finite() || max_abs == 0.0 {
        return None;
    }
    let floor = max_abs * 1e-6;
    let proj = eig.eigenvectors.transpose() * DVector::from_column_slice(g);
    let scaled = DVector::from_iterator(
        proj.len(),
        proj.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(p, l)| p / l.abs().max(floor)),
    );
    let d = &eig.eigenvectors * scaled;
    if d.iter().all(|v| v.is_finite()) {
        Some(d.iter().copied().collect())
    } else {
        None
    }
}

/// Solve `H d = -g` for the Newton step, using a pseudo-inverse when the
/// Hessian is singular.
fn newton_direction(hess: &DMatrix<f64>, g: &[f64]) -> Option<Vec<f64>> {
    let rhs = DVector::from_column_slice(g);
    let lu = hess.clone().lu();
    if let Some(sol) = lu.solve(&(-&rhs)) {
        if sol.iter().all(|v| v.is_finite()) {
            return Some(sol.iter().copied().collect());
        }
    }
    let pinv = hess.clone().pseudo_inverse(1e-12).ok()?;
    let sol = -(pinv * rhs);
    if sol.iter().all(|v| v.is_finite()) {
        Some(sol.iter().copied().collect())
    } else {
        None
    }
}

/// Bisection root finder on a bracketing interval.
///
/// Bisects until the bracket width drops below `tol` and returns the
/// midpoint. Requires a sign change over `(lo, hi)`.
pub fn find_root(f: &dyn Fn(f64) -> f64, bracket: (f64, f64), tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) {
        return Err(Error::numerical("bracket invalid: lo must be below hi"));
    }
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if !(flo * fhi < 0.0) {
        return Err(Error::numerical(
            "bracket invalid: no sign change over (lo, hi)",
        ));
    }
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // bracket at floating-point resolution
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if flo * fm < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Inverse of a symmetric matrix, preferring Cholesky (for definite input)
/// and falling back to LU, then to the SVD pseudo-inverse.
///
/// The boolean is true when the fallback pseudo-inverse was used.
pub fn sym_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
        return Ok((chol.inverse(), false));
    }
    let lu = m.clone().lu();
    if let Some(inv) = lu.try_inverse() {
        if inv.iter().all(|v| v.is_finite()) {
            return Ok((inv, false));
        }
    }
    let pinv = m
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::numerical(format!("pseudo-inverse failed: {e}")))?;
    Ok((pinv, true))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
