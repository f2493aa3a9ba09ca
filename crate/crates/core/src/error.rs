use std::fmt;

/// Errors produced by the smoothing kernels and solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible dimensions between operands.
    ShapeMismatch(String),
    /// Cholesky factorization failed; `block` is the 1-based time step at
    /// which the pivot block lost positive definiteness.
    NotPositiveDefinite { block: usize },
    /// A model or solver parameter is outside its admissible range.
    InvalidParameter(String),
    /// Backtracking line search exhausted its budget without satisfying the
    /// sufficient-decrease condition. Usually a model/Jacobian inconsistency.
    LineSearchFailed { backtracks: u32 },
    /// The constraint system admits no interior point.
    Infeasible(String),
    /// A Gauss-Newton direction subproblem has an empty feasible set.
    SubproblemInfeasible(String),
    /// Iterative solver hit its iteration budget; `residual` is the final
    /// optimality residual (infinity norm).
    MaxIterReached { iters: usize, residual: f64 },
    /// Outlier screening removed every measurement.
    AllMeasurementsRemoved,
    /// The requested check is only defined for catalog penalties.
    NotInCatalog,
    /// The penalty sup is +infinity; the payload describes the improving ray.
    Unbounded(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NotPositiveDefinite { block } => {
                write!(f, "matrix not positive definite at block {block}")
            }
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::LineSearchFailed { backtracks } => {
                write!(f, "line search failed after {backtracks} backtracks")
            }
            Error::Infeasible(msg) => write!(f, "infeasible: {msg}"),
            Error::SubproblemInfeasible(msg) => write!(f, "subproblem infeasible: {msg}"),
            Error::MaxIterReached { iters, residual } => {
                write!(f, "no convergence in {iters} iterations (residual {residual:.3e})")
            }
            Error::AllMeasurementsRemoved => write!(f, "all measurements removed as outliers"),
            Error::NotInCatalog => write!(f, "operation only defined for catalog penalties"),
            Error::Unbounded(msg) => write!(f, "objective unbounded: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
