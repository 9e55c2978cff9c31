//! Regularized Gauss-Newton solvers for nonlinear least-squares systems in
//! the root-mean-square scaling, with deterministic and mini-batch variants,
//! adaptive damping, batch-size planners, and run diagnostics.

pub mod det;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod problem;
pub mod stoch;
pub mod trace;

pub use error::{Error, Result};
