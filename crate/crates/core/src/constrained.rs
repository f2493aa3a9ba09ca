//! Inequality-constrained smoothing.
//!
//! The affine case minimizes the smoothing quadratic subject to per-step
//! constraints `B_k x_k <= b_k`, solved by a primal-dual interior-point
//! method on the relaxed KKT system
//!
//! ```text
//! F_mu(s, u, x) = [ s + Bx - b, SU1 - mu 1, Cx + B^T u - c ]
//! ```
//!
//! Each Newton step eliminates (ds, du) and solves
//! `(C + B^T S^-1 U B) dx = rhs`; since `B` is block diagonal per time step
//! the matrix keeps the block-tridiagonal pattern of `C` and Algorithm-style
//! forward elimination applies unchanged. Steps are damped by a
//! fraction-to-boundary rule so `s, u` stay strictly positive, and `mu` is
//! divided by 10 on two of every three iterations.
//!
//! The nonlinear case (smooth models and/or smooth constraints) wraps the
//! affine solver in a Gauss-Newton outer loop: linearize everything at the
//! current trajectory, solve the constrained direction subproblem, and
//! backtrack on an exact-penalty merit function.

use nalgebra::{DMatrix, DVector};

use crate::blocktri::BlockVector;
use crate::linear::{
    assemble_linearization, CovCache, IterRecord, NormalSystem, SmootherSolution, SolveStatus,
};
use crate::model::{AffineConstraints, ConstraintSet, NonlinearStateSpace};
use crate::nonlinear::{nl_objective_cached, GnOptions};
use crate::{Error, Result};

/// Interior-point iteration controls.
#[derive(Debug, Clone)]
pub struct IpOptions {
    pub max_iter: usize,
    /// Starting relaxation; `None` uses `u^T s / len` at the initial point.
    pub mu0: Option<f64>,
    /// Stop when stationarity and feasibility reach this level.
    pub tol: f64,
    /// Complementarity target: every `u_i s_i` must fall below this.
    pub comp_tol: f64,
    /// Fraction-to-boundary damping factor in (0, 1).
    pub boundary: f64,
}

impl Default for IpOptions {
    fn default() -> Self {
        IpOptions { max_iter: 40, mu0: None, tol: 1e-6, comp_tol: 1e-8, boundary: 0.995 }
    }
}

impl IpOptions {
    fn validate(&self) -> Result<()> {
        if !(self.boundary > 0.0 && self.boundary < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "fraction-to-boundary factor {} not in (0,1)",
                self.boundary
            )));
        }
        if self.tol <= 0.0 || self.comp_tol <= 0.0 {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Interior-point iterate for the affine-constrained quadratic problem.
#[derive(Debug, Clone)]
pub struct IpState {
    pub x: BlockVector,
    /// Dual variables, strictly positive during iteration.
    pub u: DVector<f64>,
    /// Slacks, strictly positive during iteration.
    pub s: DVector<f64>,
    pub mu: f64,
}

/// Dual solution report of the constrained solve.
#[derive(Debug, Clone)]
pub struct Duals {
    pub u: DVector<f64>,
    pub s: DVector<f64>,
}

fn stack_rows(cons: &AffineConstraints, x: &BlockVector) -> DVector<f64> {
    let mut out = DVector::zeros(cons.total_rows());
    let mut at = 0;
    for (k, b) in cons.blocks.iter().enumerate() {
        if b.nrows() > 0 {
            out.rows_mut(at, b.nrows()).copy_from(&(b * x.block(k)));
            at += b.nrows();
        }
    }
    out
}

fn stack_bounds(cons: &AffineConstraints) -> DVector<f64> {
    let mut out = DVector::zeros(cons.total_rows());
    let mut at = 0;
    for b in &cons.bounds {
        out.rows_mut(at, b.len()).copy_from(b);
        at += b.len();
    }
    out
}

fn apply_transpose(cons: &AffineConstraints, v: &DVector<f64>, n: usize) -> BlockVector {
    let mut out = BlockVector::zeros(n, cons.blocks.len());
    let mut at = 0;
    for (k, b) in cons.blocks.iter().enumerate() {
        if b.nrows() > 0 {
            out.set_block(k, &(b.transpose() * v.rows(at, b.nrows())));
            at += b.nrows();
        }
    }
    out
}

/// Largest step `<= 1` keeping `v + a dv >= (1 - damping) v`, i.e. the
/// fraction-to-boundary rule.
fn boundary_step(v: &DVector<f64>, dv: &DVector<f64>, damping: f64) -> f64 {
    let mut alpha = 1.0_f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-damping * v[i] / dv[i]);
        }
    }
    alpha
}

/// Relaxed KKT residual `F_mu` split into its three blocks.
fn residuals(
    sys: &NormalSystem,
    cons: &AffineConstraints,
    state: &IpState,
    mu: f64,
) -> Result<(DVector<f64>, DVector<f64>, BlockVector)> {
    let bx = stack_rows(cons, &state.x);
    let b = stack_bounds(cons);
    let r1 = &state.s + &bx - &b;
    let r2 = DVector::from_iterator(
        state.s.len(),
        state.s.iter().zip(state.u.iter()).map(|(s, u)| s * u - mu),
    );
    let mut r3 = sys.gradient(&state.x)?;
    let btu = apply_transpose(cons, &state.u, state.x.block_dim());
    r3.axpy(1.0, &btu);
    Ok((r1, r2, r3))
}

/// One damped Newton step on the relaxed KKT system. Returns the new state;
/// `mu` is left untouched (the outer loop owns the schedule).
pub fn ip_step(
    state: &IpState,
    sys: &NormalSystem,
    cons: &AffineConstraints,
    boundary: f64,
) -> Result<IpState> {
    let n = state.x.block_dim();
    let (r1, r2, r3) = residuals(sys, cons, state, state.mu)?;

    // Newton matrix C + B^T S^-1 U B: per-step diagonal modification.
    let mut matrix = sys.matrix.clone();
    let mut at = 0;
    for (k, b) in cons.blocks.iter().enumerate() {
        let rows = b.nrows();
        if rows == 0 {
            continue;
        }
        let mut scaled = b.clone();
        for i in 0..rows {
            let w = state.u[at + i] / state.s[at + i];
            for j in 0..b.ncols() {
                scaled[(i, j)] *= w;
            }
        }
        matrix.add_to_diag(k, &(b.transpose() * scaled));
        at += rows;
    }

    // rhs = -r3 - B^T S^-1 (U r1 - r2)
    let weighted = DVector::from_iterator(
        state.s.len(),
        (0..state.s.len()).map(|i| (state.u[i] * r1[i] - r2[i]) / state.s[i]),
    );
    let mut rhs = apply_transpose(cons, &weighted, n);
    rhs.axpy(1.0, &r3);
    rhs.scale(-1.0);

    let (dx, _) = matrix.solve(&rhs)?;

    // du = S^-1 (-r2 + U r1 + U B dx), ds = -r1 - B dx
    let bdx = stack_rows(cons, &dx);
    let du = DVector::from_iterator(
        state.s.len(),
        (0..state.s.len())
            .map(|i| (-r2[i] + state.u[i] * r1[i] + state.u[i] * bdx[i]) / state.s[i]),
    );
    let ds = -&r1 - &bdx;

    let alpha = boundary_step(&state.s, &ds, boundary).min(boundary_step(&state.u, &du, boundary));
    let mut x = state.x.clone();
    x.axpy(alpha, &dx);
    Ok(IpState {
        x,
        u: &state.u + &du * alpha,
        s: &state.s + &ds * alpha,
        mu: state.mu,
    })
}

/// Solve `min 1/2 x^T C x - c^T x  s.t.  B x <= b` by the primal-dual
/// interior-point method. Constraints are per-step blocks.
pub fn solve_qp_constrained(
    sys: &NormalSystem,
    cons: &AffineConstraints,
    opts: &IpOptions,
) -> Result<(SmootherSolution, Duals)> {
    opts.validate()?;
    let n = sys.matrix.block_dim();
    let len = sys.matrix.len();
    cons.validate(n, len)?;
    let total = cons.total_rows();
    if total == 0 {
        let (x, _) = sys.matrix.solve(&sys.rhs)?;
        let objective = sys.quadratic(&x)?;
        let residual_norm = sys.gradient(&x)?.norm() / (1.0 + sys.rhs.norm());
        return Ok((
            SmootherSolution {
                x,
                objective,
                residual_norm,
                iterations: Vec::new(),
                status: SolveStatus::Converged,
            },
            Duals { u: DVector::zeros(0), s: DVector::zeros(0) },
        ));
    }

    // Start from the unconstrained minimizer when C is invertible, else 0.
    let x0 = match sys.matrix.solve(&sys.rhs) {
        Ok((x, _)) => x,
        Err(Error::NotPositiveDefinite { .. }) => BlockVector::zeros(n, len),
        Err(e) => return Err(e),
    };
    let bx = stack_rows(cons, &x0);
    let b = stack_bounds(cons);
    let s0 = DVector::from_iterator(total, (0..total).map(|i| (b[i] - bx[i]).max(1.0)));
    let u0 = DVector::from_element(total, 1.0);
    let mu0 = opts.mu0.unwrap_or_else(|| u0.dot(&s0) / total as f64);
    let mut state = IpState { x: x0, u: u0, s: s0, mu: mu0 };

    let mut iterations = Vec::new();
    for iter in 0..opts.max_iter {
        let (r1, _, r3) = residuals(sys, cons, &state, 0.0)?;
        let comp = state
            .s
            .iter()
            .zip(state.u.iter())
            .map(|(s, u)| s * u)
            .fold(0.0_f64, f64::max);
        let stat = r3.as_dvector().amax();
        let feas = r1.amax();
        iterations.push(IterRecord {
            objective: sys.quadratic(&state.x)?,
            residual: stat.max(feas).max(comp),
            step: state.mu,
        });
        if stat <= opts.tol && feas <= opts.tol && comp <= opts.comp_tol {
            let objective = sys.quadratic(&state.x)?;
            return Ok((
                SmootherSolution {
                    x: state.x,
                    objective,
                    residual_norm: stat,
                    iterations,
                    status: SolveStatus::Converged,
                },
                Duals { u: state.u, s: state.s },
            ));
        }
        state = ip_step(&state, sys, cons, opts.boundary)?;
        // mu schedule: aggressive on two of every three iterations
        if iter % 3 != 2 {
            state.mu /= 10.0;
        }
    }

    let (r1, _, r3) = residuals(sys, cons, &state, 0.0)?;
    Err(Error::MaxIterReached {
        iters: opts.max_iter,
        residual: r3.as_dvector().amax().max(r1.amax()),
    })
}

/// Constrained Gauss-Newton smoother for nonlinear models and constraints.
///
/// Each outer iteration solves the affine-constrained direction subproblem
/// `min f_lin(d)  s.t.  B^nu d <= b - xi(x^nu)` and backtracks on the exact
/// penalty merit `f(x) + penalty * |max(xi(x) - b, 0)|_1`, with the penalty
/// weight kept above the current largest multiplier.
pub fn smooth_constrained_nonlinear(
    model: &NonlinearStateSpace,
    constraints: &ConstraintSet,
    x_init: Option<BlockVector>,
    gn_opts: &GnOptions,
    ip_opts: &IpOptions,
) -> Result<SmootherSolution> {
    let cov = CovCache::from_nonlinear(model)?;
    let mut x = match x_init {
        Some(x0) => x0,
        None => crate::nonlinear::propagate_init(model),
    };
    let mut penalty = 1.0_f64;
    let merit = |y: &BlockVector, pen: f64| -> Result<f64> {
        Ok(nl_objective_cached(model, &cov, y)? + pen * constraints.violation(y).sum())
    };

    let mut fx = nl_objective_cached(model, &cov, &x)?;
    let tol = gn_opts.tol.unwrap_or(1e-8 * (1.0 + fx));
    let mut iterations = Vec::new();
    let mut status = SolveStatus::MaxIterReached;

    for _ in 0..gn_opts.max_iter {
        let lin = model.linearize(&x)?;
        let sys = assemble_linearization(&lin, &cov)?;
        let sub_cons = constraints.linearize_at(&x);
        let (dir, duals) = match solve_qp_constrained(&sys, &sub_cons, ip_opts) {
            Ok(ok) => ok,
            Err(Error::Infeasible(m)) => return Err(Error::SubproblemInfeasible(m)),
            Err(e) => return Err(e),
        };
        let d = dir.x;

        // raise the penalty above the active multipliers before measuring
        // the model decrease, so the merit model is consistent
        let max_dual = duals.u.iter().fold(0.0_f64, |a, &v| a.max(v));
        if penalty < 2.0 * max_dual {
            penalty = 2.0 * max_dual + 1.0;
        }

        let viol0 = constraints.violation(&x).sum();
        fx = nl_objective_cached(model, &cov, &x)?;
        let merit0 = fx + penalty * viol0;
        // linearized constraints are satisfied exactly by the subproblem, so
        // the model merit after the step drops the penalty term entirely
        let f_lin_d = crate::nonlinear::linearized_objective(&lin, &cov, &d);
        let dmodel = (f_lin_d - merit0).min(0.0);
        iterations.push(IterRecord { objective: merit0, residual: dmodel.abs(), step: 1.0 });
        if dmodel.abs() <= tol {
            status = SolveStatus::Converged;
            break;
        }

        let (gamma, _) =
            crate::nonlinear::armijo_search(|y| merit(y, penalty), &x, &d, dmodel, gn_opts)?;
        x.axpy(gamma, &d);
        if let Some(last) = iterations.last_mut() {
            last.step = gamma;
        }
    }

    let viol = constraints.violation(&x).amax();
    let objective = nl_objective_cached(model, &cov, &x)?;
    Ok(SmootherSolution { x, objective, residual_norm: viol, iterations, status })
}
