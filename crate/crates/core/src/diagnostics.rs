//! Problem-constant estimation, batch curvature probes, closed-form
//! iteration/batch budgets, and the scaled prox-displacement metric used
//! for stopping and reporting.

use itertools::Itertools;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::det::uniform_ball_point;
use crate::error::{Error, Result};
use crate::linalg::{self, SpectralCache};
use crate::problem::{BatchHandle, ResidualProblem};

/// How a constant entered the table: supplied by the caller or measured
/// from a sampled point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    User,
    Estimated,
}

/// A nonnegative constant together with where it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub provenance: Provenance,
}

impl Estimate {
    pub fn user(value: f64) -> Self {
        Self {
            value: checked_constant(value),
            provenance: Provenance::User,
        }
    }

    pub fn estimated(value: f64) -> Self {
        Self {
            value: checked_constant(value),
            provenance: Provenance::Estimated,
        }
    }
}

fn checked_constant(value: f64) -> f64 {
    assert!(
        value.is_finite() && value >= 0.0,
        "problem constants must be finite and nonnegative, got {value}"
    );
    value
}

/// Smoothness, value, and curvature bounds for one problem, keyed by the
/// dimensions they were measured against. Derived bounds (`l_g2`, `l_f2`)
/// are recomputed from their constituents on every call so they can never
/// drift out of sync with the stored fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub m: usize,
    pub n: usize,
    /// Lipschitz bound for the scaled Jacobian map.
    pub l_fhat: Option<Estimate>,
    /// Operator-norm bound for batch Jacobians, uniform over batch choices.
    pub m_g: Option<Estimate>,
    /// Operator-norm bound for the full scaled Jacobian.
    pub m_f: Option<Estimate>,
    /// Value bound for the batch residual norm, uniform over batch choices.
    pub p_g1: Option<Estimate>,
    /// Value bound for the full scaled residual norm.
    pub p_f1: Option<Estimate>,
    /// Lipschitz bound for the squared residual components.
    pub l_f: Option<Estimate>,
    /// Curvature floor of the residual Gram matrix (zero when absent).
    pub mu: Option<Estimate>,
    /// Between-component spread constant driving batch variance.
    pub sigma_tilde: Option<Estimate>,
}

impl ProblemConstants {
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            l_fhat: None,
            m_g: None,
            m_f: None,
            p_g1: None,
            p_f1: None,
            l_f: None,
            mu: None,
            sigma_tilde: None,
        }
    }

    pub fn with_l_fhat(mut self, value: f64) -> Self {
        self.l_fhat = Some(Estimate::user(value));
        self
    }

    pub fn with_m_g(mut self, value: f64) -> Self {
        self.m_g = Some(Estimate::user(value));
        self
    }

    pub fn with_m_f(mut self, value: f64) -> Self {
        self.m_f = Some(Estimate::user(value));
        self
    }

    pub fn with_p_g1(mut self, value: f64) -> Self {
        self.p_g1 = Some(Estimate::user(value));
        self
    }

    pub fn with_p_f1(mut self, value: f64) -> Self {
        self.p_f1 = Some(Estimate::user(value));
        self
    }

    pub fn with_l_f(mut self, value: f64) -> Self {
        self.l_f = Some(Estimate::user(value));
        self
    }

    pub fn with_mu(mut self, value: f64) -> Self {
        self.mu = Some(Estimate::user(value));
        self
    }

    pub fn with_sigma_tilde(mut self, value: f64) -> Self {
        self.sigma_tilde = Some(Estimate::user(value));
        self
    }

    fn require(slot: Option<Estimate>, name: &'static str) -> Result<f64> {
        slot.map(|e| e.value).ok_or(Error::MissingEstimate { name })
    }

    pub fn require_l_fhat(&self) -> Result<f64> {
        Self::require(self.l_fhat, "L_Fhat")
    }

    pub fn require_m_g(&self) -> Result<f64> {
        Self::require(self.m_g, "M_G")
    }

    pub fn require_m_f(&self) -> Result<f64> {
        Self::require(self.m_f, "M_F")
    }

    pub fn require_p_g1(&self) -> Result<f64> {
        Self::require(self.p_g1, "P_g1")
    }

    pub fn require_p_f1(&self) -> Result<f64> {
        Self::require(self.p_f1, "P_f1")
    }

    pub fn require_l_f(&self) -> Result<f64> {
        Self::require(self.l_f, "l_F")
    }

    pub fn require_mu(&self) -> Result<f64> {
        Self::require(self.mu, "mu")
    }

    pub fn require_sigma_tilde(&self) -> Result<f64> {
        Self::require(self.sigma_tilde, "sigma_tilde")
    }

    /// Gradient-smoothness bound for the batch squared norm, rebuilt from
    /// the operator-norm, Lipschitz, and value bounds.
    pub fn l_g2(&self) -> Result<f64> {
        let m_g = self.require_m_g()?;
        let l_fhat = self.require_l_fhat()?;
        let p_g1 = self.require_p_g1()?;
        Ok(2.0 * (m_g * m_g + l_fhat * p_g1))
    }

    /// Gradient-smoothness bound for the full squared norm.
    pub fn l_f2(&self) -> Result<f64> {
        let m_f = self.require_m_f()?;
        let l_fhat = self.require_l_fhat()?;
        let p_f1 = self.require_p_f1()?;
        Ok(2.0 * (m_f * m_f + l_fhat * p_f1))
    }
}

/// Spread constant of the squared residual components at one point: the
/// corrected sample deviation of the unscaled component squares, rescaled
/// by the finite-population factor. Zero when there is a single component.
fn component_square_spread(resid_hat: &DVector<f64>) -> f64 {
    let m = resid_hat.len();
    if m < 2 {
        return 0.0;
    }
    let mf = m as f64;
    let mean = resid_hat.norm_squared();
    let var = resid_hat
        .iter()
        .map(|ri| {
            let dev = mf * ri * ri - mean;
            dev * dev
        })
        .sum::<f64>()
        / (mf - 1.0);
    var.max(0.0).sqrt() * (mf / (mf - 1.0)).sqrt()
}

/// Measures problem constants over `cloud_size` points sampled uniformly
/// in the ball of `radius` around `x0`.
///
/// Operator-norm and value bounds are exact suprema over batch choices at
/// each sampled point (the supremum over batches of either quantity is
/// attained on a single component, so no batch sampling is needed).
/// Lipschitz bounds are twice the largest secant ratio over point pairs.
/// Fields are flagged `Estimated` except where the problem carries an
/// exact hint.
pub fn estimate_constants(
    p: &ResidualProblem,
    x0: &DVector<f64>,
    cloud_size: usize,
    radius: f64,
    seed: u64,
) -> Result<ProblemConstants> {
    if cloud_size < 2 {
        return Err(Error::Domain(
            "constant estimation needs a cloud of at least two points".into(),
        ));
    }
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::Domain(
            "cloud radius must be finite and nonnegative".into(),
        ));
    }
    if x0.len() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n(),
            got: x0.len(),
        });
    }

    let m = p.m();
    let mf = m as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<DVector<f64>> = (0..cloud_size)
        .map(|_| uniform_ball_point(&mut rng, x0, radius))
        .collect();

    let mut resids = Vec::with_capacity(points.len());
    let mut jacs = Vec::with_capacity(points.len());
    for x in &points {
        resids.push(p.residual_hat(x)?);
        jacs.push(p.full_jacobian_hat(x)?);
    }

    let mut m_g: f64 = 0.0;
    let mut m_f: f64 = 0.0;
    let mut mu = f64::INFINITY;
    let mut p_g1: f64 = 0.0;
    let mut p_f1: f64 = 0.0;
    let mut sigma_tilde: f64 = 0.0;
    for (resid, jac) in resids.iter().zip(&jacs) {
        let max_row = (0..m).map(|r| jac.row(r).norm()).fold(0.0_f64, f64::max);
        m_g = m_g.max(mf.sqrt() * max_row);
        let (s_min, s_max) = linalg::sigma_bounds(jac)?;
        m_f = m_f.max(s_max);
        mu = mu.min(s_min * s_min);
        p_g1 = p_g1.max(mf.sqrt() * resid.amax());
        p_f1 = p_f1.max(resid.norm());
        sigma_tilde = sigma_tilde.max(component_square_spread(resid));
    }

    let mut jac_secant: f64 = 0.0;
    let mut square_secant: f64 = 0.0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let dist = (&points[i] - &points[j]).norm();
            if dist < 1e-12 {
                continue;
            }
            jac_secant = jac_secant.max((&jacs[i] - &jacs[j]).norm() / dist);
            for (ri, rj) in resids[i].iter().zip(resids[j].iter()) {
                let si = mf * ri * ri;
                let sj = mf * rj * rj;
                square_secant = square_secant.max((si - sj).abs() / dist);
            }
        }
    }

    let l_fhat = match p.lipschitz_hint() {
        Some(hint) => Estimate::user(hint),
        None => Estimate::estimated(2.0 * jac_secant),
    };
    let m_f = match p.operator_norm_hint() {
        Some(hint) => Estimate::user(hint),
        None => Estimate::estimated(m_f),
    };

    Ok(ProblemConstants {
        m,
        n: p.n(),
        l_fhat: Some(l_fhat),
        m_g: Some(Estimate::estimated(m_g)),
        m_f: Some(m_f),
        p_g1: Some(Estimate::estimated(2.0 * p_g1)),
        p_f1: Some(Estimate::estimated(2.0 * p_f1)),
        l_f: Some(Estimate::estimated(2.0 * square_secant)),
        mu: Some(Estimate::estimated(mu)),
        sigma_tilde: Some(Estimate::estimated(sigma_tilde)),
    })
}

/// One probe measurement: the smallest squared singular value seen over
/// batches of one size at one point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlEntry {
    pub point: usize,
    pub batch_size: usize,
    pub min_sigma_min_sq: f64,
}

/// Outcome of probing whether batch Jacobian Gram matrices stay uniformly
/// positive definite across points and batch sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlReport {
    pub entries: Vec<PlEntry>,
    /// Smallest probed squared singular value across all entries.
    pub mu_hat: f64,
    pub pass: bool,
}

/// Threshold below which the probed curvature floor counts as failed.
pub const PL_THRESHOLD: f64 = 1e-12;

const ENUMERATION_CAP: u64 = 256;
const SAMPLED_BATCHES: usize = 64;

fn batch_count_capped(m: usize, b: usize, cap: u64) -> u64 {
    let mut count: u128 = 1;
    for i in 1..=b {
        count = count * (m - b + i) as u128 / i as u128;
        if count > u128::from(cap) {
            return cap + 1;
        }
    }
    count as u64
}

/// Probes the smallest squared singular value of batch Jacobians over the
/// given points and batch sizes, enumerating every batch when there are at
/// most 256 of them and otherwise sampling 64 batches reproducibly. A
/// batch larger than the parameter dimension is rank deficient by
/// construction and scores zero without enumeration. The report compares
/// the smallest observation against [`PL_THRESHOLD`].
pub fn pl_check(
    p: &ResidualProblem,
    points: &[DVector<f64>],
    batch_sizes: &[usize],
) -> Result<PlReport> {
    if points.is_empty() || batch_sizes.is_empty() {
        return Err(Error::Domain(
            "curvature probe needs at least one point and one batch size".into(),
        ));
    }
    let m = p.m();
    for &b in batch_sizes {
        if b == 0 || b > m {
            return Err(Error::Domain(format!(
                "batch size {b} is outside 1..={m}"
            )));
        }
    }
    let mut entries = Vec::with_capacity(points.len() * batch_sizes.len());
    for (pi, x) in points.iter().enumerate() {
        for &b in batch_sizes {
            let min_sigma_min_sq = if b > p.n() {
                0.0
            } else {
                min_sigma_sq_over_batches(p, x, b)?
            };
            entries.push(PlEntry {
                point: pi,
                batch_size: b,
                min_sigma_min_sq,
            });
        }
    }
    let mu_hat = entries
        .iter()
        .map(|e| e.min_sigma_min_sq)
        .fold(f64::INFINITY, f64::min);
    Ok(PlReport {
        pass: mu_hat > PL_THRESHOLD,
        mu_hat,
        entries,
    })
}

fn min_sigma_sq_over_batches(p: &ResidualProblem, x: &DVector<f64>, b: usize) -> Result<f64> {
    let m = p.m();
    let mut min_sq = f64::INFINITY;
    let mut probe = |indices: Vec<usize>| -> Result<()> {
        let batch = BatchHandle::new(indices, m)?;
        let jac = p.jacobian_hat(x, &batch)?;
        let (s_min, _) = linalg::sigma_bounds(&jac)?;
        min_sq = min_sq.min(s_min * s_min);
        Ok(())
    };
    if batch_count_capped(m, b, ENUMERATION_CAP) <= ENUMERATION_CAP {
        for combo in (1..=m).combinations(b) {
            probe(combo)?;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..SAMPLED_BATCHES {
            let mut indices: Vec<usize> = rand::seq::index::sample(&mut rng, m, b)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            indices.sort_unstable();
            probe(indices)?;
        }
    }
    Ok(min_sq)
}

const MAX_DECREASE_SHARE: f64 = 0.999999;

fn check_share(name: &str, r: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0 && r < 1.0) {
        return Err(Error::Domain(format!(
            "{name} must lie strictly between 0 and 1"
        )));
    }
    Ok(())
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta > 0.0 && eta < 2.0) {
        return Err(Error::Domain(
            "relaxation eta must lie strictly between 0 and 2".into(),
        ));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Domain("target accuracy must be positive".into()));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma >= 1.0) {
        return Err(Error::Domain("cap multiplier gamma must be at least 1".into()));
    }
    Ok(())
}

fn check_initial_bound(e: f64) -> Result<()> {
    if !(e.is_finite() && e >= 0.0) {
        return Err(Error::Domain(
            "initial value bound must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

fn check_weight_floor(l: f64) -> Result<()> {
    if !(l.is_finite() && l > 0.0) {
        return Err(Error::Domain(
            "curvature weight floor must be positive".into(),
        ));
    }
    Ok(())
}

fn ceil_iterations(k: f64) -> u64 {
    if k.is_nan() || k <= 0.0 {
        0
    } else {
        k.ceil() as u64
    }
}

/// Shared shape of every batch display: `a / (eps^4 r^2 + a/m)` rounded
/// up, clamped to at least one sample and at most the stated caps.
fn batch_from_ratio(a: f64, eps: f64, r: f64, m: usize, extra_cap: Option<usize>) -> usize {
    let mf = m as f64;
    let raw = if a <= 0.0 {
        1.0
    } else if !a.is_finite() {
        mf
    } else {
        (a / (eps.powi(4) * r * r + a / mf)).ceil()
    };
    let mut b = (raw as usize).max(1).min(m);
    if let Some(cap) = extra_cap {
        b = b.min(cap);
    }
    b.max(1)
}

/// Step-norm ceiling used inside the batch displays: how far one damped
/// step can travel given the value bound, the weight floor, and the
/// operator-norm bound.
fn step_travel_bound(m_g: f64, p_g1: f64, l_floor: f64) -> f64 {
    (2.0 * p_g1 / l_floor).sqrt().min(m_g / l_floor)
}

/// Iteration count and batch size for the fixed-accuracy stochastic scheme
/// in its sublinear regime. `e_g2_0` bounds the initial squared batch
/// residual, `r` is the share of the accuracy target assigned to the
/// optimization term, and `l_floor` is the smallest curvature weight the
/// run will use.
pub fn budget_sublinear_stochastic(
    c: &ProblemConstants,
    e_g2_0: f64,
    eps: f64,
    r: f64,
    eta: f64,
    gamma: f64,
    l_floor: f64,
) -> Result<(u64, usize)> {
    check_share("decrease share r", r)?;
    if r > MAX_DECREASE_SHARE {
        return Err(Error::Domain(
            "decrease share r is too close to 1".into(),
        ));
    }
    check_eta(eta)?;
    check_eps(eps)?;
    check_gamma(gamma)?;
    check_initial_bound(e_g2_0)?;
    check_weight_floor(l_floor)?;

    let m_g = c.require_m_g()?;
    let p_g1 = c.require_p_g1()?;
    let l_fhat = c.require_l_fhat()?;
    let l_f = c.require_l_f()?;
    let sigma_tilde = c.require_sigma_tilde()?;
    let mf = c.m as f64;

    let cap = m_g * m_g + gamma * p_g1 * l_fhat;
    let spread = eta * (2.0 - eta);
    let k = ceil_iterations(8.0 * cap * e_g2_0 / (eps * eps * (1.0 - r) * spread));

    let travel = step_travel_bound(m_g, p_g1, l_floor);
    let noise = 2.0 * l_f * (mf * (mf - 1.0)).sqrt() * travel + sigma_tilde;
    let a = 64.0 * cap * cap / (spread * spread) * noise * noise;
    let b = batch_from_ratio(a, eps, r, c.m, None);
    Ok((k, b))
}

/// Iteration count and batch size for the fixed-accuracy stochastic scheme
/// under a positive curvature floor, where the iteration count grows only
/// logarithmically in the accuracy.
pub fn budget_linear_stochastic(
    c: &ProblemConstants,
    e_g2_0: f64,
    eps: f64,
    r: f64,
    eta: f64,
    gamma: f64,
    l_floor: f64,
) -> Result<(u64, usize)> {
    check_share("decrease share r", r)?;
    if r > MAX_DECREASE_SHARE {
        return Err(Error::Domain(
            "decrease share r is too close to 1".into(),
        ));
    }
    check_eta(eta)?;
    check_eps(eps)?;
    check_gamma(gamma)?;
    check_initial_bound(e_g2_0)?;
    check_weight_floor(l_floor)?;

    let m_g = c.require_m_g()?;
    let p_g1 = c.require_p_g1()?;
    let l_fhat = c.require_l_fhat()?;
    let l_f = c.require_l_f()?;
    let sigma_tilde = c.require_sigma_tilde()?;
    let mu = c.require_mu()?;
    if mu <= 0.0 {
        return Err(Error::Domain(
            "curvature floor must be positive for the logarithmic budget".into(),
        ));
    }
    let mf = c.m as f64;

    let ratio = (gamma * l_fhat * p_g1 + mu) / (eta * (2.0 - eta) * mu);
    let log_arg = 4.0 * m_g * m_g * e_g2_0 / (eps * eps * (1.0 - r));
    let k = if log_arg > 0.0 {
        ceil_iterations(2.0 * ratio * log_arg.ln())
    } else {
        0
    };

    let travel = step_travel_bound(m_g, p_g1, l_floor);
    let noise = l_f * (mf * (mf - 1.0)).sqrt() * travel + sigma_tilde;
    let big = 256.0 * m_g.powi(4) * noise * noise * ratio * ratio;
    let b = batch_from_ratio(big, eps, r, c.m, Some(c.n));
    Ok((k, b))
}

/// Smallest worst-case curvature weight over the one-parameter family of
/// margin factors: the minimum over factors above one of the larger of a
/// falling damping-driven branch and a rising inexactness-driven branch,
/// located at their crossing.
fn search_floor(m_g: f64, p_g1: f64, tau_tilde: f64, coef: f64) -> f64 {
    let amp = tau_tilde + p_g1 * p_g1 / tau_tilde;
    let rise = |c: f64| amp * (coef * c) * (coef * c);
    if m_g == 0.0 {
        return rise(1.0);
    }
    if coef == 0.0 {
        return 0.0;
    }
    let fall = |c: f64| m_g * m_g / (tau_tilde * (c.sqrt() - 1.0));
    let mut lo = 1.0;
    let mut hi = 2.0;
    while fall(hi) > rise(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return fall(lo).max(rise(lo));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fall(mid) > rise(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c_star = 0.5 * (lo + hi);
    fall(c_star).max(rise(c_star))
}

/// Iteration count, curvature-weight search floor, and batch size for the
/// norm-target stochastic scheme. `tau_l` is the damping product held
/// fixed by the displays, `tau_tilde` the damping floor entering the
/// search-floor display, and the three shares split the accuracy target
/// between the optimization, inexactness, and sampling terms. With `pl`
/// set, the variant for a positive curvature floor is used.
#[allow(clippy::too_many_arguments)]
pub fn budget_scheme4(
    c: &ProblemConstants,
    e_g2_0: f64,
    eps: f64,
    r1: f64,
    r2: f64,
    r3: f64,
    tau_l: f64,
    tau_tilde: f64,
    gamma: f64,
    pl: bool,
) -> Result<(u64, f64, usize)> {
    check_share("share r1", r1)?;
    check_share("share r2", r2)?;
    check_share("share r3", r3)?;
    if (r1 + r2 + r3 - 1.0).abs() > 1e-12 {
        return Err(Error::Domain("accuracy shares must sum to 1".into()));
    }
    check_eps(eps)?;
    check_gamma(gamma)?;
    check_initial_bound(e_g2_0)?;
    if !(tau_l.is_finite() && tau_l > 0.0) {
        return Err(Error::Domain("damping product must be positive".into()));
    }
    if !(tau_tilde.is_finite() && tau_tilde > 0.0) {
        return Err(Error::Domain("damping floor must be positive".into()));
    }

    let l_g2 = c.l_g2()?;
    let l_f = c.require_l_f()?;
    let sigma_tilde = c.require_sigma_tilde()?;
    let m_g = c.require_m_g()?;
    let p_g1 = c.require_p_g1()?;
    let q = {
        let f = m_g * m_g / tau_l + 1.0;
        f * f
    };
    let eps2 = eps * eps;

    if pl {
        let mu = c.require_mu()?;
        if mu <= 0.0 {
            return Err(Error::Domain(
                "curvature floor must be positive for the logarithmic budget".into(),
            ));
        }
        let log_arg = 4.0 * m_g * m_g * e_g2_0 / (r1 * eps2);
        let k = if log_arg > 0.0 {
            ceil_iterations(gamma * l_g2 / (2.0 * mu) * q * log_arg.ln())
        } else {
            0
        };
        let coef = 4.0 * gamma * l_g2 * l_f * m_g * m_g / (mu * r2 * eps2);
        let floor = search_floor(m_g, p_g1, tau_tilde, coef);
        let d = 4.0 * gamma * l_g2 * m_g * m_g / mu * q * sigma_tilde;
        let b = batch_from_ratio(d * d, eps, r3, c.m, Some(c.n));
        Ok((k, floor, b))
    } else {
        let k = ceil_iterations(2.0 * gamma * l_g2 * q * e_g2_0 / (r1 * eps2));
        let coef = 4.0 * gamma * l_g2 * l_f / (r2 * eps2);
        let floor = search_floor(m_g, p_g1, tau_tilde, coef);
        let d = 2.0 * gamma * l_g2 * q * sigma_tilde;
        let b = batch_from_ratio(d * d, eps, r3, c.m, None);
        Ok((k, floor, b))
    }
}

/// Scaled displacement norm of one damped prox step: the norm of
/// `l_ref * (T(x) - x)` where `T` minimizes the damped linearized model at
/// weight `l_ref` and damping `tau` over the given batch. Returns zero at
/// a batch residual root.
pub fn prox_grad_norm(
    p: &ResidualProblem,
    x: &DVector<f64>,
    l_ref: f64,
    tau: f64,
    batch: &BatchHandle,
) -> Result<f64> {
    if !(l_ref.is_finite() && l_ref > 0.0) {
        return Err(Error::Domain("reference weight must be positive".into()));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Domain("damping must be positive".into()));
    }
    let resid = p.batch_residual_hat(x, batch)?;
    if resid.norm() == 0.0 {
        return Ok(0.0);
    }
    let jac = p.jacobian_hat(x, batch)?;
    let cache = SpectralCache::factorize(jac, resid)?;
    Ok(l_ref * cache.step_norm_squared(tau * l_ref).sqrt())
}
