//! Kalman smoothing as structured optimization.
//!
//! Every smoother in this crate reduces to the same computational kernel: a
//! symmetric positive definite block-tridiagonal linear solve ([`blocktri`]).
//! The classic RTS smoother is the linear-Gaussian instance ([`linear`]);
//! nonlinear models are handled by Gauss-Newton with Armijo backtracking
//! ([`nonlinear`]); inequality constraints, heavy-tailed measurement noise,
//! general piecewise linear-quadratic losses and sparsity penalties are all
//! handled by interior-point or projected-gradient methods whose per-iteration
//! linear algebra has the same block-tridiagonal shape ([`constrained`],
//! [`robust`], [`plq`], [`sparse`]).
//!
//! [`experiments`] contains ground-truth simulation, Monte Carlo replication
//! and the scoring used by the benchmark scenarios.

pub mod blocktri;
pub mod constrained;
mod error;
pub mod experiments;
pub mod linear;
pub mod model;
pub mod nonlinear;
pub mod plq;
pub mod robust;
pub mod sparse;

pub use error::{Error, Result};
