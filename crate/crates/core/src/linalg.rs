//! Dense symmetric eigendecomposition and the damped normal-equation solves
//! built on top of it.
//!
//! A single factorization of the active Gram matrix (`J^T J` when the batch
//! is taller than the parameter count, `J J^T` otherwise) is reused across
//! arbitrarily many damping values: each probe costs a couple of
//! matrix-vector products at most, and the 1-D searches over the damping go
//! through scalar spectral sums that cost O(min(b, n)) per probe.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Which Gram matrix the cache factorized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramSide {
    /// `J^T J`, n-by-n. Used when the batch has more rows than columns.
    GramN,
    /// `J J^T`, b-by-b. Used when b <= n (ties included).
    GramB,
}

const MAX_JACOBI_SWEEPS: usize = 30;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Rotations sweep the strict upper triangle until the off-diagonal
/// Frobenius mass drops below `1e-14` times its initial value. Returns
/// eigenvectors as columns of `q` and unsorted eigenvalues.
fn jacobi_eigen_sym(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut q = DMatrix::<f64>::identity(n, n);

    let off_norm = |m: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[(i, j)] * m[(i, j)];
            }
        }
        (2.0 * s).sqrt()
    };

    let initial_off = off_norm(&m);
    if initial_off == 0.0 {
        return Ok((q, m.diagonal()));
    }
    let threshold = 1e-14 * initial_off;

    for _sweep in 0..MAX_JACOBI_SWEEPS {
        for p in 0..n {
            for r in (p + 1)..n {
                let apq = m[(p, r)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(r, r)];
                // Rotation angle zeroing the (p, r) entry.
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, r)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, r)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(r, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(r, k)] = s * mpk + c * mqk;
                }
                m[(p, r)] = 0.0;
                m[(r, p)] = 0.0;

                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkq = q[(k, r)];
                    q[(k, p)] = c * qkp - s * qkq;
                    q[(k, r)] = s * qkp + c * qkq;
                }
            }
        }
        if off_norm(&m) <= threshold {
            return Ok((q, m.diagonal()));
        }
    }
    Err(Error::Factorization {
        sweeps: MAX_JACOBI_SWEEPS,
    })
}

/// Eigendecomposition of the active Gram matrix of a normalized batch
/// Jacobian, together with the projected residual vectors that make
/// repeated damped solves cheap.
#[derive(Clone, Debug)]
pub struct SpectralCache {
    side: GramSide,
    q: DMatrix<f64>,
    /// Descending, clamped to be nonnegative.
    lambda: DVector<f64>,
    j: DMatrix<f64>,
    resid: DVector<f64>,
    /// `J^T F` (either side; length n).
    jt_f: DVector<f64>,
    /// Spectral projection of the right-hand side: `Q^T J^T F` on the
    /// GramN side, `Q^T F` on the GramB side.
    proj: DVector<f64>,
}

impl SpectralCache {
    /// Factorizes the Gram matrix of `j` and pre-projects the residual
    /// `resid` (the batch residual evaluated at the same point as `j`).
    pub fn factorize(j: DMatrix<f64>, resid: DVector<f64>) -> Result<Self> {
        let (b, n) = (j.nrows(), j.ncols());
        if resid.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                got: resid.len(),
            });
        }
        let side = if b > n { GramSide::GramN } else { GramSide::GramB };
        let gram = match side {
            GramSide::GramN => j.transpose() * &j,
            GramSide::GramB => &j * j.transpose(),
        };
        let (q, raw_lambda) = jacobi_eigen_sym(&gram)?;

        // Descending order, carrying eigenvector columns along.
        let dim = raw_lambda.len();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| raw_lambda[b].partial_cmp(&raw_lambda[a]).unwrap());
        let mut lambda = DVector::zeros(dim);
        let mut q_sorted = DMatrix::zeros(dim, dim);
        for (dst, &src) in order.iter().enumerate() {
            lambda[dst] = raw_lambda[src];
            q_sorted.set_column(dst, &q.column(src));
        }
        let q = q_sorted;

        let lambda_max = if dim > 0 { lambda[0].max(0.0) } else { 0.0 };
        let neg_tol = 1e-10 * lambda_max.max(1.0);
        for v in lambda.iter_mut() {
            if *v < 0.0 {
                if *v < -neg_tol {
                    return Err(Error::Reconstruct {
                        detail: format!("eigenvalue {v:.3e} below -{neg_tol:.3e}"),
                    });
                }
                *v = 0.0;
            }
        }

        // Orthogonality and reconstruction checks.
        let qtq = q.transpose() * &q;
        let ortho_err = (&qtq - DMatrix::<f64>::identity(dim, dim)).abs().max();
        if ortho_err > 1e-10 {
            return Err(Error::Reconstruct {
                detail: format!("eigenvector orthogonality error {ortho_err:.3e}"),
            });
        }
        let recon = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
        let gram_max = gram.abs().max();
        let recon_err = (&recon - &gram).abs().max();
        if recon_err > 1e-8 * gram_max.max(f64::MIN_POSITIVE) {
            return Err(Error::Reconstruct {
                detail: format!(
                    "reconstruction error {recon_err:.3e} vs scale {gram_max:.3e}"
                ),
            });
        }

        let jt_f = j.transpose() * &resid;
        let proj = match side {
            GramSide::GramN => q.transpose() * &jt_f,
            GramSide::GramB => q.transpose() * &resid,
        };
        Ok(Self {
            side,
            q,
            lambda,
            j,
            resid,
            jt_f,
            proj,
        })
    }

    pub fn side(&self) -> GramSide {
        self.side
    }

    /// Descending nonnegative eigenvalues of the active Gram matrix.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.resid
    }

    /// `J^T F` at the factorization point (half the mean-square gradient).
    pub fn jt_resid(&self) -> &DVector<f64> {
        &self.jt_f
    }

    /// Solves `(J^T J + tau_l I) d = J^T F` for the cached residual.
    ///
    /// GramN side: `d = Q (Lambda + tau_l)^{-1} Q^T J^T F`. GramB side uses
    /// `d = J^T Q (Lambda + tau_l)^{-1} Q^T F`, which is exact because `Q`
    /// spans all of batch space; unlike the textbook low-rank update form
    /// with its `1/tau_l` prefactor, it stays accurate as `tau_l -> 0`.
    pub fn regularized_solve(&self, tau_l: f64) -> DVector<f64> {
        assert!(tau_l > 0.0, "damping must be positive");
        let scaled = DVector::from_fn(self.proj.len(), |i, _| {
            self.proj[i] / (self.lambda[i] + tau_l)
        });
        match self.side {
            GramSide::GramN => &self.q * scaled,
            GramSide::GramB => self.j.transpose() * (&self.q * scaled),
        }
    }

    /// Solves `(J^T J + tau_l I) d = rhs` for an arbitrary right-hand side
    /// in parameter space, reusing the factorization. On the GramB side this
    /// is the low-rank (Sherman-Morrison-Woodbury) expression
    /// `d = (1/tau_l)(rhs - J^T Q (Lambda + tau_l)^{-1} Q^T J rhs)`.
    pub fn solve_param_rhs(&self, tau_l: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        assert!(tau_l > 0.0, "damping must be positive");
        let n = self.j.ncols();
        if rhs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: rhs.len(),
            });
        }
        Ok(match self.side {
            GramSide::GramN => {
                let w = self.q.transpose() * rhs;
                let scaled =
                    DVector::from_fn(w.len(), |i, _| w[i] / (self.lambda[i] + tau_l));
                &self.q * scaled
            }
            GramSide::GramB => {
                let jr = &self.j * rhs;
                let w = self.q.transpose() * jr;
                let scaled =
                    DVector::from_fn(w.len(), |i, _| w[i] / (self.lambda[i] + tau_l));
                let correction = self.j.transpose() * (&self.q * scaled);
                (rhs - correction) / tau_l
            }
        })
    }

    /// Spectral pairs `(lambda_i, w_i)` such that for any damping `s > 0`
    ///
    /// - `<(J^T J + s I)^{-1} J^T F, J^T F> = sum_i w_i / (lambda_i + s)`,
    /// - `||(J^T J + s I)^{-1} J^T F||^2 = sum_i w_i / (lambda_i + s)^2`,
    /// - `||F - J (J^T J + s I)^{-1} J^T F||^2
    ///    = ||F||^2 - sum_i w_i (lambda_i + 2 s) / (lambda_i + s)^2`.
    ///
    /// On the GramN side `w_i = c_i^2` with `c = Q^T J^T F`; on the GramB
    /// side `w_i = lambda_i c_i^2` with `c = Q^T F`.
    pub fn spectral_terms(&self) -> Vec<(f64, f64)> {
        match self.side {
            GramSide::GramN => self
                .lambda
                .iter()
                .zip(self.proj.iter())
                .map(|(&l, &c)| (l, c * c))
                .collect(),
            GramSide::GramB => self
                .lambda
                .iter()
                .zip(self.proj.iter())
                .map(|(&l, &c)| (l, l * c * c))
                .collect(),
        }
    }

    /// `<(J^T J + tau_l I)^{-1} J^T F, J^T F>` as a scalar spectral sum;
    /// O(min(b, n)) per probe.
    pub fn quadratic_form(&self, tau_l: f64) -> f64 {
        assert!(tau_l > 0.0, "damping must be positive");
        self.spectral_terms()
            .iter()
            .map(|(l, w)| w / (l + tau_l))
            .sum()
    }

    /// `||(J^T J + tau_l I)^{-1} J^T F||^2` as a scalar spectral sum.
    pub fn step_norm_squared(&self, tau_l: f64) -> f64 {
        assert!(tau_l > 0.0, "damping must be positive");
        self.spectral_terms()
            .iter()
            .map(|(l, w)| w / ((l + tau_l) * (l + tau_l)))
            .sum()
    }

    /// Minimum-norm solution of `min ||F - J h||` (damping -> 0 limit),
    /// with rank cutoff `1e-12 * lambda_max`.
    pub fn min_norm_solve(&self) -> DVector<f64> {
        let lambda_max = if self.lambda.is_empty() { 0.0 } else { self.lambda[0] };
        let cut = 1e-12 * lambda_max;
        match self.side {
            GramSide::GramN => {
                let scaled = DVector::from_fn(self.proj.len(), |i, _| {
                    if self.lambda[i] > cut {
                        self.proj[i] / self.lambda[i]
                    } else {
                        0.0
                    }
                });
                &self.q * scaled
            }
            GramSide::GramB => {
                let scaled = DVector::from_fn(self.proj.len(), |i, _| {
                    if self.lambda[i] > cut {
                        self.proj[i] / self.lambda[i]
                    } else {
                        0.0
                    }
                });
                self.j.transpose() * (&self.q * scaled)
            }
        }
    }

    /// Squared residual of the unconstrained linearized least-squares
    /// problem, `min_h ||F - J h||^2`.
    pub fn min_residual_squared(&self) -> f64 {
        let lambda_max = if self.lambda.is_empty() { 0.0 } else { self.lambda[0] };
        let cut = 1e-12 * lambda_max;
        let f2 = self.resid.norm_squared();
        let explained: f64 = match self.side {
            GramSide::GramN => self
                .proj
                .iter()
                .zip(self.lambda.iter())
                .map(|(c, l)| if *l > cut { c * c / l } else { 0.0 })
                .sum(),
            GramSide::GramB => self
                .proj
                .iter()
                .zip(self.lambda.iter())
                .map(|(c, l)| if *l > cut { c * c } else { 0.0 })
                .sum(),
        };
        (f2 - explained).max(0.0)
    }
}

/// Applies the factorization of an independent batch's Jacobian to a
/// parameter-space half-gradient: returns `(J~^T J~ + tau_l I)^{-1} g`.
pub fn doubly_stochastic_solve(
    cache_tilde: &SpectralCache,
    tau_l: f64,
    g: &DVector<f64>,
) -> Result<DVector<f64>> {
    cache_tilde.solve_param_rhs(tau_l, g)
}

/// Extreme singular values of a normalized batch Jacobian: `sigma_max` over
/// the whole operator and `sigma_min` of the row space (zero when the batch
/// has more rows than columns, by rank).
pub fn sigma_bounds(j: &DMatrix<f64>) -> Result<(f64, f64)> {
    let (b, n) = (j.nrows(), j.ncols());
    let zero_resid = DVector::zeros(b);
    let cache = SpectralCache::factorize(j.clone(), zero_resid)?;
    let lambda = cache.eigenvalues();
    let sigma_max = if lambda.is_empty() { 0.0 } else { lambda[0].sqrt() };
    let sigma_min = if b > n {
        0.0
    } else {
        lambda[lambda.len() - 1].max(0.0).sqrt()
    };
    Ok((sigma_min, sigma_max))
}
