use thiserror::Error;

/// Crate-wide error type. Every fallible operation in the library returns
/// one of these; variants carry enough context to name the offending input.
#[derive(Debug, Error)]
pub enum Error {
    /// A residual component evaluated to NaN or infinity. Index is 1-based.
    #[error("residual component {index} is not finite at the evaluation point")]
    NonFiniteResidual { index: usize },

    /// A gradient entry evaluated to NaN or infinity. Index is 1-based.
    #[error("gradient of component {index} is not finite at the evaluation point")]
    NonFiniteGradient { index: usize },

    /// Vector or matrix sizes do not line up for the requested operation.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The symmetric eigensolver did not reduce the off-diagonal mass
    /// within its sweep budget.
    #[error("eigendecomposition failed to converge within {sweeps} sweeps")]
    Factorization { sweeps: usize },

    /// The eigendecomposition does not reproduce the input matrix within
    /// tolerance, or an eigenvalue is too negative to be rounding noise.
    #[error("eigendecomposition reconstruction check failed: {detail}")]
    Reconstruct { detail: String },

    /// Bracketing phase of the 1-D damping search exhausted its doubling
    /// budget without enclosing a minimum.
    #[error("failed to bracket the 1-D minimum after {doublings} doublings")]
    BracketFailure { doublings: usize },

    /// Scalar root finding (constraint multiplier search) did not converge.
    #[error("root finding failed to converge after {steps} bisection steps")]
    RootFindFailure { steps: usize },

    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The solver produced too many consecutive null steps.
    #[error("no acceptable step found for {count} consecutive iterations")]
    StallLimit { count: usize },

    /// The regularization line search reached its upper cap without the
    /// acceptance test passing.
    #[error("line search reached the cap {cap:.6e} without acceptance")]
    CapExceeded { cap: f64 },

    /// A certificate or step-size rule needs a problem constant that was
    /// neither supplied nor estimated.
    #[error("missing estimate for constant {name}")]
    MissingEstimate { name: &'static str },

    /// Every residual in the sampled batch is zero, so batch quantities
    /// that divide by the batch norm are undefined.
    #[error("sampled batch has zero residual norm")]
    ZeroBatchResidual,

    /// A step-size rule was asked to normalize a zero gradient.
    #[error("gradient is zero; the step-size rule is undefined")]
    ZeroGradient,

    /// A problem specification names no known builtin and carries no
    /// explicit matrices.
    #[error("unknown problem spec: {0}")]
    UnknownSpec(String),

    /// Two run configurations that must share a problem/seed set do not.
    #[error("configurations do not describe the same problem: {0}")]
    MismatchedProblem(String),

    /// Malformed run configuration; the message names the offending key.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
