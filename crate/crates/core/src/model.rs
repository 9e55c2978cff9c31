//! The damped local model around an anchor point: its value and gradient at
//! arbitrary points, the exact minimizer (the damped Gauss-Newton step), the
//! 1-D search for the best damping normalization, and trust-region gap
//! diagnostics.
//!
//! With residual `G` and Jacobian `J` fixed at the anchor `x`, the model is
//!
//! ```text
//! psi(y) = tau/2 + ||G + J (y - x)||^2 / (2 tau) + (L/2) ||y - x||^2
//! ```
//!
//! which upper-bounds the root-mean-square residual norm at `y` whenever `L`
//! dominates the true Jacobian Lipschitz constant, for every `tau > 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SpectralCache;
use crate::problem::{BatchHandle, ResidualProblem};

/// Smallest admissible damping normalization. Solvers declare convergence on
/// an exactly zero residual instead of building a model, so the floor only
/// shows up when a 1-D search drives `tau` toward zero on a consistent
/// linearization.
pub const TAU_FLOOR: f64 = 1e-300;

/// A frozen local model: anchor point, curvature weight `L`, normalization
/// `tau`, the batch it was built on, and the residual/Jacobian evaluated at
/// the anchor for that batch. Immutable after construction.
#[derive(Clone, Debug)]
pub struct ModelAnchor {
    x: DVector<f64>,
    l: f64,
    tau: f64,
    batch: BatchHandle,
    resid: DVector<f64>,
    jac: DMatrix<f64>,
}

impl ModelAnchor {
    /// Evaluates the batch residual and Jacobian at `x` and freezes them.
    pub fn new(
        p: &ResidualProblem,
        x: DVector<f64>,
        l: f64,
        tau: f64,
        batch: BatchHandle,
    ) -> Result<Self> {
        let resid = p.batch_residual_hat(&x, &batch)?;
        let jac = p.jacobian_hat(&x, &batch)?;
        Self::from_parts(x, l, tau, batch, resid, jac)
    }

    /// Builds an anchor from already-evaluated residual and Jacobian
    /// (callers on the hot path avoid re-evaluating the problem).
    pub fn from_parts(
        x: DVector<f64>,
        l: f64,
        tau: f64,
        batch: BatchHandle,
        resid: DVector<f64>,
        jac: DMatrix<f64>,
    ) -> Result<Self> {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Domain(format!("curvature weight L = {l} must be positive")));
        }
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::Domain(format!("normalization tau = {tau} must be positive")));
        }
        if jac.nrows() != resid.len() {
            return Err(Error::DimensionMismatch {
                expected: resid.len(),
                got: jac.nrows(),
            });
        }
        if jac.ncols() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: jac.ncols(),
            });
        }
        Ok(Self {
            x,
            l,
            tau: tau.max(TAU_FLOOR),
            batch,
            resid,
            jac,
        })
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn batch(&self) -> &BatchHandle {
        &self.batch
    }

    /// Batch residual at the anchor.
    pub fn resid(&self) -> &DVector<f64> {
        &self.resid
    }

    /// Batch Jacobian at the anchor.
    pub fn jac(&self) -> &DMatrix<f64> {
        &self.jac
    }

    /// Factorizes the anchor's Jacobian for repeated damped solves.
    pub fn cache(&self) -> Result<SpectralCache> {
        SpectralCache::factorize(self.jac.clone(), self.resid.clone())
    }

    /// Norm of the linearized residual `||G + J (y - x)||`.
    pub fn linearized_norm(&self, y: &DVector<f64>) -> f64 {
        (&self.resid + &self.jac * (y - &self.x)).norm()
    }

    /// Model value `tau/2 + ||G + J (y-x)||^2/(2 tau) + (L/2) ||y-x||^2`.
    pub fn psi_value(&self, y: &DVector<f64>) -> f64 {
        let lin = self.linearized_norm(y);
        let dx2 = (y - &self.x).norm_squared();
        self.tau / 2.0 + lin * lin / (2.0 * self.tau) + self.l / 2.0 * dx2
    }

    /// Gradient of the model in `y`:
    /// `L (y - x) + (1/tau) J^T (G + J (y - x))`.
    pub fn psi_gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let dy = y - &self.x;
        let lin = &self.resid + &self.jac * &dy;
        self.l * dy + self.jac.transpose() * lin / self.tau
    }

    /// Exact minimizer of the model:
    /// `x - (J^T J + tau L I)^{-1} J^T G`.
    pub fn prox_point(&self, cache: &SpectralCache) -> DVector<f64> {
        &self.x - cache.regularized_solve(self.tau * self.l)
    }

    /// Relaxed step `x + eta (prox - x)`; `eta = 1` is the exact minimizer.
    pub fn scaled_step(&self, cache: &SpectralCache, eta: f64) -> DVector<f64> {
        &self.x - cache.regularized_solve(self.tau * self.l) * eta
    }
}

/// Squared linearized residual at the damped step,
/// `||G - J (J^T J + sigma I)^{-1} J^T G||^2`, evaluated as
/// `R + sigma^2 K(sigma)` (see `residual_split`).
pub fn linearized_residual_squared(cache: &SpectralCache, sigma: f64) -> f64 {
    let (r_floor, curvature) = residual_split(cache, sigma);
    r_floor + sigma * sigma * curvature
}

/// Splits the squared linearized residual into the damping-independent floor
/// `R = ||G||^2 - sum_i w_i / lambda_i` (the min-norm linearized residual,
/// clamped at zero) and the curvature sum
/// `K(sigma) = sum_i w_i / (lambda_i (lambda_i + sigma)^2)`, so that
/// `W(sigma) = R + sigma^2 K(sigma)` exactly. Every term of `K` is positive,
/// so the sigma-dependence carries no cancellation; the one cancellation-prone
/// difference sits in the constant `R`. Directions below the rank cutoff
/// carry no true weight and are dropped from both sums.
fn residual_split(cache: &SpectralCache, sigma: f64) -> (f64, f64) {
    let g2 = cache.residual().norm_squared();
    let lambda = cache.eigenvalues();
    let lambda_max = if lambda.is_empty() { 0.0 } else { lambda[0] };
    let cutoff = 1e-12 * lambda_max;
    let mut explained = 0.0;
    let mut curvature = 0.0;
    for (l, w) in cache.spectral_terms().iter().filter(|(l, _)| *l > cutoff) {
        explained += w / l;
        curvature += w / (l * (l + sigma) * (l + sigma));
    }
    ((g2 - explained).max(0.0), curvature)
}

/// Model value at the relaxed damped step as a function of `tau` alone,
/// evaluated through the spectral cache in O(min(b, n)):
///
/// ```text
/// psi(x + eta (T - x)) = tau/2 + g2/(2 tau) - eta (2 - eta) S(tau L)/(2 tau)
/// ```
///
/// computed in the cancellation-free arrangement
/// `tau/2 + R/(2 tau) + tau L^2 K/2 + (L/2) ||d||^2 + (1-eta)^2 S/(2 tau)`
/// with `R + sigma^2 K = ||G - J d||^2`, `S = <d, J^T G>`, `d` the full
/// damped step; stable down to the `tau` floor.
pub fn prox_model_value(cache: &SpectralCache, l: f64, tau: f64, eta: f64) -> f64 {
    let sigma = tau * l;
    let (r_floor, curvature) = residual_split(cache, sigma);
    let s = cache.quadratic_form(sigma);
    let dn2 = cache.step_norm_squared(sigma);
    let shrink = (1.0 - eta) * (1.0 - eta);
    tau / 2.0
        + (r_floor + shrink * s) / (2.0 * tau)
        + tau * l * l * curvature / 2.0
        + l / 2.0 * dn2
}

/// Derivative in `tau` of `prox_model_value(.., eta = 1)`:
/// `1/2 - W(tau L) / (2 tau^2) = 1/2 - R/(2 tau^2) - L^2 K(tau L)/2`,
/// finite at the floor whenever the linearization is consistent (`R = 0`).
fn prox_model_derivative(cache: &SpectralCache, l: f64, tau: f64) -> f64 {
    let (r_floor, curvature) = residual_split(cache, tau * l);
    let floor_term = if r_floor == 0.0 {
        0.0
    } else {
        r_floor / (2.0 * tau * tau)
    };
    0.5 - floor_term - l * l * curvature / 2.0
}

const MAX_BRACKET_DOUBLINGS: usize = 64;
const MAX_TAU_BISECTIONS: usize = 4000;

/// Minimizes `tau -> prox_model_value(cache, l, tau, 1)` over `tau > 0`.
///
/// The objective is strictly convex for the exact step. The minimum is
/// bracketed by doubling from the residual norm until the value increases,
/// then localized by bisection on the sign of the analytic derivative over
/// the log-spaced interval `[TAU_FLOOR, hi]` until `|d psi / d tau| <= tol`.
/// The stationarity condition is `tau^2 = ||G - J d(tau L)||^2`, so the
/// minimizer equals the linearized residual norm at its own step; it is
/// pinned at `TAU_FLOOR` when the derivative is already nonnegative there
/// (consistent linearization with mild curvature). The returned value never
/// does worse than the default normalization `tau = g1`.
pub fn optimal_tau(cache: &SpectralCache, l: f64, tol: f64) -> Result<f64> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Domain(format!("curvature weight L = {l} must be positive")));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Domain(format!("tolerance {tol} must be positive")));
    }
    let g2 = cache.residual().norm_squared();
    if g2 == 0.0 {
        return Err(Error::ZeroBatchResidual);
    }
    let g1 = g2.sqrt();
    let value = |tau: f64| prox_model_value(cache, l, tau, 1.0);
    let deriv = |tau: f64| prox_model_derivative(cache, l, tau);

    // Pinned at the floor: derivative nonnegative everywhere above it.
    if deriv(TAU_FLOOR) >= 0.0 {
        return Ok(TAU_FLOOR);
    }

    // Grow the right edge until the objective turns upward.
    let mut hi = g1;
    let mut hi_value = value(hi);
    let mut doublings = 0;
    loop {
        let next = 2.0 * hi;
        let next_value = value(next);
        if next_value > hi_value {
            hi = next;
            break;
        }
        hi = next;
        hi_value = next_value;
        doublings += 1;
        if doublings >= MAX_BRACKET_DOUBLINGS {
            return Err(Error::BracketFailure { doublings });
        }
    }

    if deriv(hi).abs() <= tol {
        return Ok(pick_better(cache, l, hi, g1));
    }

    // Geometric bisection on the derivative sign.
    let mut lo = TAU_FLOOR;
    for _ in 0..MAX_TAU_BISECTIONS {
        let mid = (lo * hi).sqrt();
        let d = deriv(mid);
        if d.abs() <= tol {
            return Ok(pick_better(cache, l, mid, g1));
        }
        if d < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            // Interval exhausted in floating point. At the floor this is the
            // pinned boundary minimum; anywhere else the derivative target
            // was unresolvable.
            if lo <= 2.0 * TAU_FLOOR {
                return Ok(TAU_FLOOR);
            }
            return Ok(pick_better(cache, l, (lo * hi).sqrt(), g1));
        }
    }
    Err(Error::RootFindFailure {
        steps: MAX_TAU_BISECTIONS,
    })
}

/// Numerical safety net: of the candidate and the default normalization
/// `tau = g1`, return whichever gives the smaller model value.
fn pick_better(cache: &SpectralCache, l: f64, candidate: f64, g1: f64) -> f64 {
    if prox_model_value(cache, l, candidate, 1.0) <= prox_model_value(cache, l, g1, 1.0) {
        candidate
    } else {
        g1
    }
}

/// Piecewise progress gauge: `t^2/2` on `[0, 1]`, `t - 1/2` beyond.
/// Continuous, nondecreasing, and convex.
pub fn kappa(t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("kappa argument {t} must be nonnegative")));
    }
    Ok(if t <= 1.0 { t * t / 2.0 } else { t - 0.5 })
}

const MAX_RADIUS_BISECTIONS: usize = 200;

/// Solves `min ||G + J h||^2 subject to ||h|| <= r` at `x` (full batch) and
/// returns `(f2, constrained_min)`: the unconstrained solve when it already
/// fits in the ball, otherwise a Lagrange-multiplier bisection on
/// `||(J^T J + lambda I)^{-1} J^T G|| = r`.
fn ball_constrained_linear_min(
    p: &ResidualProblem,
    x: &DVector<f64>,
    r: f64,
) -> Result<(f64, f64)> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("radius {r} must be positive")));
    }
    let resid = p.residual_hat(x)?;
    let jac = p.full_jacobian_hat(x)?;
    let f2 = resid.norm_squared();
    let cache = SpectralCache::factorize(jac.clone(), resid.clone())?;

    let h_free = cache.min_norm_solve();
    if h_free.norm() <= r {
        return Ok((f2, cache.min_residual_squared()));
    }

    // The constraint is active; ||h(lambda)|| decreases monotonically from
    // ||h_free|| > r toward 0, and lambda = ||J^T G|| / r already forces
    // ||h(lambda)|| <= r.
    let mut lo = 0.0_f64;
    let mut hi = (cache.jt_resid().norm() / r).max(f64::MIN_POSITIVE);
    let mut solution = None;
    for _ in 0..MAX_RADIUS_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 {
            break;
        }
        let norm = cache.step_norm_squared(mid).sqrt();
        if (norm - r).abs() <= 1e-12 {
            solution = Some(mid);
            break;
        }
        if norm > r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = solution.ok_or(Error::RootFindFailure {
        steps: MAX_RADIUS_BISECTIONS,
    })?;
    let h = -cache.regularized_solve(lambda);
    let constrained = (&resid + &jac * h).norm_squared();
    Ok((f2, constrained))
}

/// Gap between the squared residual mean and the best squared linearized
/// residual within a radius-`r` ball: `f2 - min {||G + J h||^2 : ||h|| <= r}`.
/// Zero at stationary points, at most `f2`, and nondecreasing in `r`.
pub fn delta_r(p: &ResidualProblem, x: &DVector<f64>, r: f64) -> Result<f64> {
    let (f2, constrained) = ball_constrained_linear_min(p, x, r)?;
    Ok((f2 - constrained).max(0.0))
}

/// Same gap on the norm scale: `f1 - min {||G + J h|| : ||h|| <= r}`.
pub fn delta_tilde_r(p: &ResidualProblem, x: &DVector<f64>, r: f64) -> Result<f64> {
    let (f2, constrained) = ball_constrained_linear_min(p, x, r)?;
    Ok((f2.sqrt() - constrained.max(0.0).sqrt()).max(0.0))
}
