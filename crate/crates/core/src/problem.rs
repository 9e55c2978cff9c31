//! Residual problem definitions and the normalized evaluation maps.
//!
//! A problem is a smooth map `F: R^n -> R^m` given component-wise. All
//! solver-facing quantities are normalized: the full residual is scaled by
//! `1/sqrt(m)` and a sampled batch of `b` components by `1/sqrt(b)`, so the
//! squared norms are averages of squared components and batch quantities are
//! unbiased estimates of the full ones.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type EvalFn = dyn Fn(usize, &DVector<f64>) -> f64 + Send + Sync;
type GradFn = dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// A sorted set of distinct component indices (1-based, as in problem
/// definitions). The full batch is `1..=m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchHandle {
    indices: Vec<usize>,
}

impl BatchHandle {
    /// Builds a batch from 1-based indices; they must be strictly
    /// increasing and within `1..=m`.
    pub fn new(indices: Vec<usize>, m: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidConfig("batch must be non-empty".into()));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidConfig(
                    "batch indices must be strictly increasing".into(),
                ));
            }
        }
        if indices[0] < 1 || *indices.last().unwrap() > m {
            return Err(Error::InvalidConfig(format!(
                "batch indices must lie in 1..={m}"
            )));
        }
        Ok(Self { indices })
    }

    /// The batch containing every component of an `m`-component problem.
    pub fn full(m: usize) -> Self {
        Self {
            indices: (1..=m).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// 1-based component indices, strictly increasing.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// 0-based iteration for internal evaluation loops.
    pub(crate) fn zero_based(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().map(|&i| i - 1)
    }
}

/// Known analytic facts about a generated instance, used by tests and
/// certificate checks. Populated by the builtin generators where the
/// construction makes the values exact.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    /// A point with zero residual, when the instance is consistent.
    pub root: Option<DVector<f64>>,
    /// Exact lower bound on the squared smallest singular value of the
    /// normalized Jacobian transpose (linear instances).
    pub mu: Option<f64>,
    /// Exact operator norm of the normalized Jacobian (linear instances).
    pub operator_norm: Option<f64>,
}

/// A component-wise residual map with optional analytic gradients.
///
/// Component indices are 1-based at the API surface and 0-based internally.
/// When no analytic gradient is supplied, central finite differences with
/// per-coordinate step `1e-6 * max(1, |x_j|)` stand in; runs record that
/// substitution.
#[derive(Clone)]
pub struct ResidualProblem {
    n: usize,
    m: usize,
    eval: Arc<EvalFn>,
    grad: Option<Arc<GradFn>>,
    lipschitz_hint: Option<f64>,
    operator_norm_hint: Option<f64>,
    truth: Option<GroundTruth>,
    label: String,
}

impl std::fmt::Debug for ResidualProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResidualProblem")
            .field("label", &self.label)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("analytic_grad", &self.grad.is_some())
            .finish()
    }
}

impl ResidualProblem {
    /// Builds a problem from a 0-based component evaluator and an optional
    /// 0-based analytic gradient.
    pub fn new<E>(n: usize, m: usize, label: impl Into<String>, eval: E) -> Self
    where
        E: Fn(usize, &DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        assert!(n >= 1 && m >= 1, "problem dimensions must be positive");
        Self {
            n,
            m,
            eval: Arc::new(eval),
            grad: None,
            lipschitz_hint: None,
            operator_norm_hint: None,
            truth: None,
            label: label.into(),
        }
    }

    pub fn with_gradient<G>(mut self, grad: G) -> Self
    where
        G: Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(grad));
        self
    }

    /// Optional known bound on the Lipschitz constant of the normalized
    /// Jacobian (0 for linear problems).
    pub fn with_lipschitz_hint(mut self, value: f64) -> Self {
        assert!(value >= 0.0);
        self.lipschitz_hint = Some(value);
        self
    }

    /// Optional known bound on the normalized Jacobian operator norm.
    pub fn with_operator_norm_hint(mut self, value: f64) -> Self {
        assert!(value >= 0.0);
        self.operator_norm_hint = Some(value);
        self
    }

    pub fn with_truth(mut self, truth: GroundTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    /// Dense linear instance `F(x) = A x - c` with analytic gradients.
    pub fn linear(a: DMatrix<f64>, c: DVector<f64>) -> Self {
        let (m, n) = (a.nrows(), a.ncols());
        assert_eq!(c.len(), m, "offset length must match the row count");
        let a_eval = a.clone();
        let a_grad = a.clone();
        Self::new(n, m, "linear", move |i, x| (a_eval.row(i) * x)[0] - c[i])
            .with_gradient(move |i, _x| a_grad.row(i).transpose())
            .with_lipschitz_hint(0.0)
    }

    /// Parses an explicit problem definition of the form
    /// `{"kind": "linear", "a": [[...], ...], "c": [...]}` (row-major `a`).
    pub fn from_explicit_json(v: &serde_json::Value) -> Result<Self> {
        let kind = v
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::InvalidConfig("problem spec lacks \"kind\"".into()))?;
        if kind != "linear" {
            return Err(Error::UnknownSpec(kind.to_string()));
        }
        let rows = v
            .get("a")
            .and_then(|a| a.as_array())
            .ok_or_else(|| Error::InvalidConfig("linear spec lacks matrix \"a\"".into()))?;
        let m = rows.len();
        if m == 0 {
            return Err(Error::InvalidConfig("matrix \"a\" is empty".into()));
        }
        let first = rows[0]
            .as_array()
            .ok_or_else(|| Error::InvalidConfig("matrix \"a\" rows must be arrays".into()))?;
        let n = first.len();
        let mut a = DMatrix::<f64>::zeros(m, n);
        for (i, row) in rows.iter().enumerate() {
            let row = row
                .as_array()
                .ok_or_else(|| Error::InvalidConfig("matrix \"a\" rows must be arrays".into()))?;
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            for (j, value) in row.iter().enumerate() {
                a[(i, j)] = value
                    .as_f64()
                    .ok_or_else(|| Error::InvalidConfig("matrix \"a\" entries must be numbers".into()))?;
            }
        }
        let c_values = v
            .get("c")
            .and_then(|c| c.as_array())
            .ok_or_else(|| Error::InvalidConfig("linear spec lacks offset \"c\"".into()))?;
        if c_values.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: c_values.len(),
            });
        }
        let mut c = DVector::<f64>::zeros(m);
        for (i, value) in c_values.iter().enumerate() {
            c[i] = value
                .as_f64()
                .ok_or_else(|| Error::InvalidConfig("offset \"c\" entries must be numbers".into()))?;
        }
        Ok(Self::linear(a, c))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn lipschitz_hint(&self) -> Option<f64> {
        self.lipschitz_hint
    }

    pub fn operator_norm_hint(&self) -> Option<f64> {
        self.operator_norm_hint
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    /// True when gradients come from the finite-difference fallback.
    pub fn uses_fd_gradients(&self) -> bool {
        self.grad.is_none()
    }

    /// Raw component value `F_i(x)` for a 1-based index.
    pub fn component(&self, index: usize, x: &DVector<f64>) -> Result<f64> {
        assert!(
            (1..=self.m).contains(&index),
            "component index {index} out of 1..={}",
            self.m
        );
        self.check_point(x)?;
        let value = (self.eval)(index - 1, x);
        if !value.is_finite() {
            return Err(Error::NonFiniteResidual { index });
        }
        Ok(value)
    }

    /// Component gradient for a 1-based index, analytic or central-difference.
    pub fn component_grad(&self, index: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        assert!(
            (1..=self.m).contains(&index),
            "component index {index} out of 1..={}",
            self.m
        );
        self.check_point(x)?;
        let i0 = index - 1;
        let g = match &self.grad {
            Some(grad) => grad(i0, x),
            None => self.fd_component_grad(i0, x),
        };
        if g.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        Ok(g)
    }

    fn fd_component_grad(&self, i0: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.n);
        let mut probe = x.clone();
        for j in 0..self.n {
            let h = 1e-6_f64.max(1e-6 * x[j].abs());
            probe[j] = x[j] + h;
            let fwd = (self.eval)(i0, &probe);
            probe[j] = x[j] - h;
            let bwd = (self.eval)(i0, &probe);
            probe[j] = x[j];
            g[j] = (fwd - bwd) / (2.0 * h);
        }
        g
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Normalized batch residual `(1/sqrt(b)) (F_{i_1}, ..., F_{i_b})`.
    pub fn batch_residual_hat(&self, x: &DVector<f64>, batch: &BatchHandle) -> Result<DVector<f64>> {
        self.check_point(x)?;
        let b = batch.size();
        let scale = 1.0 / (b as f64).sqrt();
        let mut r = DVector::zeros(b);
        for (row, i0) in batch.zero_based().enumerate() {
            let value = (self.eval)(i0, x);
            if !value.is_finite() {
                return Err(Error::NonFiniteResidual { index: i0 + 1 });
            }
            r[row] = scale * value;
        }
        Ok(r)
    }

    /// Normalized full residual `F(x)/sqrt(m)`.
    pub fn residual_hat(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.batch_residual_hat(x, &BatchHandle::full(self.m))
    }

    /// Normalized residual norm `||F(x)|| / sqrt(m)`.
    pub fn f1hat(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.residual_hat(x)?.norm())
    }

    /// Full-batch mean of squared components.
    pub fn f2hat(&self, x: &DVector<f64>) -> Result<f64> {
        let v = self.f1hat(x)?;
        Ok(v * v)
    }

    /// Batch residual norm `sqrt((1/b) sum_{i in B} F_i(x)^2)`.
    pub fn g1hat(&self, x: &DVector<f64>, batch: &BatchHandle) -> Result<f64> {
        Ok(self.batch_residual_hat(x, batch)?.norm())
    }

    /// Batch mean of squared components; square of `g1hat` by construction.
    pub fn g2hat(&self, x: &DVector<f64>, batch: &BatchHandle) -> Result<f64> {
        let v = self.g1hat(x, batch)?;
        Ok(v * v)
    }

    /// Normalized batch Jacobian: row `j` is `grad F_{i_j}(x)^T / sqrt(b)`.
    pub fn jacobian_hat(&self, x: &DVector<f64>, batch: &BatchHandle) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let b = batch.size();
        let scale = 1.0 / (b as f64).sqrt();
        let mut jac = DMatrix::zeros(b, self.n);
        for (row, index) in batch.indices().iter().enumerate() {
            let g = self.component_grad(*index, x)?;
            for j in 0..self.n {
                jac[(row, j)] = scale * g[j];
            }
        }
        Ok(jac)
    }

    /// Normalized full Jacobian `F'(x)/sqrt(m)`.
    pub fn full_jacobian_hat(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.jacobian_hat(x, &BatchHandle::full(self.m))
    }

    /// Gradient of the batch mean of squares: `2 J_B(x)^T G_B(x)` with the
    /// normalized batch Jacobian and residual.
    pub fn grad_f2hat(&self, x: &DVector<f64>, batch: &BatchHandle) -> Result<DVector<f64>> {
        let jac = self.jacobian_hat(x, batch)?;
        let r = self.batch_residual_hat(x, batch)?;
        Ok(2.0 * jac.transpose() * r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_identity() -> ResidualProblem {
        ResidualProblem::new(1, 1, "identity", |_, x| x[0])
            .with_gradient(|_, _| DVector::from_element(1, 1.0))
    }

    #[test]
    fn f1hat_scalar_is_absolute_value() {
        let p = scalar_identity();
        let x = DVector::from_element(1, 3.0);
        assert_eq!(p.f1hat(&x).unwrap(), 3.0);
    }

    #[test]
    fn f1hat_constant_pair() {
        let p = ResidualProblem::new(1, 2, "const", |i, _| if i == 0 { 3.0 } else { 4.0 });
        let x = DVector::zeros(1);
        let expected = 5.0 / 2.0_f64.sqrt();
        assert!((p.f1hat(&x).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn f1hat_zero_at_root() {
        let p = ResidualProblem::new(2, 2, "shift", |i, x| x[i] - 1.0);
        let root = DVector::from_element(2, 1.0);
        assert_eq!(p.f1hat(&root).unwrap(), 0.0);
    }

    #[test]
    fn g2hat_single_component() {
        let p = ResidualProblem::new(1, 2, "const", |i, _| if i == 0 { 0.0 } else { 2.0_f64.sqrt() });
        let x = DVector::zeros(1);
        let b2 = BatchHandle::new(vec![2], 2).unwrap();
        assert!((p.g2hat(&x, &b2).unwrap() - 2.0).abs() < 1e-15);
        let full = BatchHandle::full(2);
        assert!((p.g2hat(&x, &full).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_batch_matches_f1hat() {
        let p = ResidualProblem::new(3, 4, "mixed", |i, x| (i as f64 + 1.0) * x[i % 3] - 0.5);
        let x = DVector::from_vec(vec![0.3, -1.2, 0.7]);
        let full = BatchHandle::full(4);
        assert!((p.g1hat(&x, &full).unwrap() - p.f1hat(&x).unwrap()).abs() < 1e-15);
        assert!((p.g2hat(&x, &full).unwrap() - p.f2hat(&x).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn jacobian_scalar_identity() {
        let p = scalar_identity();
        let x = DVector::from_element(1, -7.0);
        let jac = p.full_jacobian_hat(&x).unwrap();
        assert_eq!(jac[(0, 0)], 1.0);
    }

    #[test]
    fn jacobian_linear_is_scaled_matrix() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = DVector::from_vec(vec![0.0, 1.0, -1.0]);
        let p = ResidualProblem::linear(a.clone(), c);
        let x = DVector::from_vec(vec![0.5, -0.5]);
        let jac = p.full_jacobian_hat(&x).unwrap();
        let expected = a / 3.0_f64.sqrt();
        assert!((jac - expected).abs().max() < 1e-15);
    }

    #[test]
    fn jacobian_singleton_batch_row() {
        let p = ResidualProblem::new(3, 2, "second", |i, x| if i == 0 { x[2] } else { 2.0 * x[0] });
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let b = BatchHandle::new(vec![2], 2).unwrap();
        let jac = p.jacobian_hat(&x, &b).unwrap();
        assert_eq!(jac.nrows(), 1);
        assert!((jac[(0, 0)] - 2.0).abs() < 1e-9);
        assert!(jac[(0, 1)].abs() < 1e-9);
        assert!(jac[(0, 2)].abs() < 1e-9);
    }

    #[test]
    fn grad_f2hat_scalar() {
        let p = scalar_identity();
        let x = DVector::from_element(1, 3.0);
        let g = p.grad_f2hat(&x, &BatchHandle::full(1)).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-15);
    }

    #[test]
    fn grad_f2hat_zero_at_root() {
        let p = ResidualProblem::new(2, 2, "shift", |i, x| x[i] - 1.0);
        let root = DVector::from_element(2, 1.0);
        let g = p.grad_f2hat(&root, &BatchHandle::full(2)).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn non_finite_residual_reports_index() {
        let p = ResidualProblem::new(1, 3, "bad", |i, x| if i == 1 { (x[0] - 1.0).ln() } else { x[0] });
        let x = DVector::zeros(1);
        match p.f1hat(&x) {
            Err(Error::NonFiniteResidual { index }) => assert_eq!(index, 2),
            other => panic!("expected NonFiniteResidual, got {other:?}"),
        }
    }

    #[test]
    fn batch_rejects_duplicates_and_out_of_range() {
        assert!(BatchHandle::new(vec![1, 1], 3).is_err());
        assert!(BatchHandle::new(vec![2, 1], 3).is_err());
        assert!(BatchHandle::new(vec![0], 3).is_err());
        assert!(BatchHandle::new(vec![4], 3).is_err());
        assert!(BatchHandle::new(vec![1, 3], 3).is_ok());
    }

    #[test]
    fn g1hat_squared_equals_g2hat() {
        let p = ResidualProblem::new(2, 5, "mix", |i, x| (i as f64 - 1.5) * x[0] + x[1].sin());
        let x = DVector::from_vec(vec![0.4, 1.3]);
        let b = BatchHandle::new(vec![1, 3, 4], 5).unwrap();
        let g1 = p.g1hat(&x, &b).unwrap();
        let g2 = p.g2hat(&x, &b).unwrap();
        assert_eq!(g1 * g1, g2);
    }
}
