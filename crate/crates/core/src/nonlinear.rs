//! Gauss-Newton smoother for nonlinear process/measurement models.
//!
//! Each iteration linearizes the model at the current trajectory, solves the
//! resulting linear-Gaussian subproblem with the block-tridiagonal kernel to
//! get a direction `d`, and backtracks along `d` until the Armijo inequality
//! `f(x + lambda^s d) <= f(x) + kappa lambda^s dmodel` holds, where `dmodel`
//! is the decrease predicted by the linearized model. `dmodel` is always
//! nonpositive and vanishes exactly at first-order stationary points, so it
//! doubles as the stopping criterion.

use crate::blocktri::BlockVector;
use crate::linear::{
    assemble_linearization, CovCache, IterRecord, SmootherSolution, SolveStatus,
};
use crate::model::{Linearization, NonlinearStateSpace};
use crate::{Error, Result};

/// Gauss-Newton iteration controls.
#[derive(Debug, Clone)]
pub struct GnOptions {
    pub max_iter: usize,
    /// Backtracking factor, in (0, 1).
    pub lambda: f64,
    /// Sufficient-decrease constant, in (0, 1).
    pub kappa: f64,
    /// Stop when `|dmodel| <= tol`; `None` uses `1e-8 * (1 + f(x_init))`.
    pub tol: Option<f64>,
    pub max_backtracks: u32,
}

impl Default for GnOptions {
    fn default() -> Self {
        GnOptions { max_iter: 100, lambda: 0.5, kappa: 1e-3, tol: None, max_backtracks: 52 }
    }
}

impl GnOptions {
    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidParameter(format!("lambda = {} not in (0,1)", self.lambda)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidParameter(format!("kappa = {} not in (0,1)", self.kappa)));
        }
        Ok(())
    }
}

/// Per-iteration record of a Gauss-Newton run.
#[derive(Debug, Clone, Copy)]
pub struct GnIter {
    /// Objective at the iterate the step started from.
    pub objective: f64,
    /// Model decrease `dmodel` at that iterate (nonpositive).
    pub model_decrease: f64,
    /// Accepted step size `gamma`.
    pub step: f64,
    pub backtracks: u32,
}

#[derive(Debug, Clone, Default)]
pub struct GnTrace {
    pub iters: Vec<GnIter>,
    /// Objective at the final iterate.
    pub final_objective: f64,
}

/// Nonlinear MAP objective
/// `1/2 |g(x) - w|^2_{Q^-1} + 1/2 |h(x) - z|^2_{R^-1}`.
pub fn nl_objective(model: &NonlinearStateSpace, x: &BlockVector) -> Result<f64> {
    let cov = CovCache::from_nonlinear(model)?;
    nl_objective_cached(model, &cov, x)
}

pub(crate) fn nl_objective_cached(
    model: &NonlinearStateSpace,
    cov: &CovCache,
    x: &BlockVector,
) -> Result<f64> {
    let (g, h) = model.eval_stacked(x)?;
    let mut total = 0.0;
    for k in 0..model.horizon() {
        let proc_res = if k == 0 {
            g.block_owned(0) - &model.init_mean
        } else {
            g.block_owned(k)
        };
        total += 0.5 * proc_res.dot(&cov.q[k].solve(&proc_res));
        if let Some(r) = cov.r[k].as_ref() {
            let meas_res = &h[k] - &model.meas_val[k];
            total += 0.5 * meas_res.dot(&r.solve(&meas_res));
        }
    }
    Ok(total)
}

/// Value of the linearized objective
/// `1/2 |G d - w_shift|^2_{Q^-1} + 1/2 |H d - z_shift|^2_{R^-1}` at `d`.
/// At `d = 0` this equals the true objective at the linearization point.
pub(crate) fn linearized_objective(
    lin: &Linearization,
    cov: &CovCache,
    d: &BlockVector,
) -> f64 {
    let len = lin.meas.len();
    let mut total = 0.0;
    for k in 0..len {
        let proc_res = if k == 0 {
            d.block_owned(0) - lin.w_shift.block_owned(0)
        } else {
            d.block_owned(k) - &lin.trans[k - 1] * d.block(k - 1) - lin.w_shift.block_owned(k)
        };
        total += 0.5 * proc_res.dot(&cov.q[k].solve(&proc_res));
        if let Some(r) = cov.r[k].as_ref() {
            let meas_res = &lin.meas[k] * d.block(k) - &lin.z_shift[k];
            total += 0.5 * meas_res.dot(&r.solve(&meas_res));
        }
    }
    total
}

/// Gauss-Newton direction at `x`: the minimizer of the linearized objective,
/// and the model decrease `dmodel = f_lin(d) - f(x) <= 0`.
pub fn gn_direction(
    model: &NonlinearStateSpace,
    x: &BlockVector,
) -> Result<(BlockVector, f64)> {
    let cov = CovCache::from_nonlinear(model)?;
    gn_direction_cached(model, &cov, x)
}

pub(crate) fn gn_direction_cached(
    model: &NonlinearStateSpace,
    cov: &CovCache,
    x: &BlockVector,
) -> Result<(BlockVector, f64)> {
    let lin = model.linearize(x)?;
    let sys = assemble_linearization(&lin, cov)?;
    let (d, _) = sys.matrix.solve(&sys.rhs)?;
    let f_at_x = linearized_objective(&lin, cov, &BlockVector::zeros(x.block_dim(), x.len()));
    let f_at_d = linearized_objective(&lin, cov, &d);
    // guard roundoff: the model decrease is nonpositive by construction
    let dmodel = (f_at_d - f_at_x).min(0.0);
    Ok((d, dmodel))
}

/// Backtracking line search: returns the accepted `gamma = lambda^s` and the
/// number of rejected trial steps. `model_decrease` must be negative.
pub fn armijo_search<F>(
    f: F,
    x: &BlockVector,
    d: &BlockVector,
    model_decrease: f64,
    opts: &GnOptions,
) -> Result<(f64, u32)>
where
    F: Fn(&BlockVector) -> Result<f64>,
{
    opts.validate()?;
    if model_decrease >= 0.0 {
        return Err(Error::InvalidParameter(
            "armijo search needs a strictly negative model decrease".into(),
        ));
    }
    let f0 = f(x)?;
    let mut gamma = 1.0;
    for s in 0..=opts.max_backtracks {
        let mut trial = x.clone();
        trial.axpy(gamma, d);
        let ft = f(&trial)?;
        if ft <= f0 + opts.kappa * gamma * model_decrease {
            return Ok((gamma, s));
        }
        gamma *= opts.lambda;
    }
    Err(Error::LineSearchFailed { backtracks: opts.max_backtracks })
}

/// Default initial trajectory: propagate the process model from the initial
/// prediction with zero noise.
pub fn propagate_init(model: &NonlinearStateSpace) -> BlockVector {
    let len = model.horizon();
    let mut x = BlockVector::zeros(model.state_dim, len);
    let mut cur = model.init_mean.clone();
    x.set_block(0, &cur);
    for k in 1..len {
        cur = model.transition.eval(k + 1, &cur);
        x.set_block(k, &cur);
    }
    x
}

/// Run the Gauss-Newton smoother from `x_init` (default: [`propagate_init`]).
pub fn smooth_nonlinear(
    model: &NonlinearStateSpace,
    x_init: Option<BlockVector>,
    opts: &GnOptions,
) -> Result<(SmootherSolution, GnTrace)> {
    opts.validate()?;
    let cov = CovCache::from_nonlinear(model)?;
    let mut x = match x_init {
        Some(x0) => x0,
        None => propagate_init(model),
    };
    let mut fx = nl_objective_cached(model, &cov, &x)?;
    let tol = opts.tol.unwrap_or(1e-8 * (1.0 + fx));

    let mut trace = GnTrace::default();
    let mut status = SolveStatus::MaxIterReached;
    let mut last_dmodel = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let (d, dmodel) = gn_direction_cached(model, &cov, &x)?;
        last_dmodel = dmodel;
        if dmodel.abs() <= tol {
            status = SolveStatus::Converged;
            break;
        }
        let (gamma, backtracks) =
            armijo_search(|y| nl_objective_cached(model, &cov, y), &x, &d, dmodel, opts)?;
        trace.iters.push(GnIter { objective: fx, model_decrease: dmodel, step: gamma, backtracks });
        x.axpy(gamma, &d);
        fx = nl_objective_cached(model, &cov, &x)?;
    }
    trace.final_objective = fx;

    let iterations = trace
        .iters
        .iter()
        .map(|it| IterRecord { objective: it.objective, residual: it.model_decrease.abs(), step: it.step })
        .collect();
    let sol = SmootherSolution {
        x,
        objective: fx,
        residual_norm: last_dmodel.abs(),
        iterations,
        status,
    };
    Ok((sol, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear;
    use crate::model::{smooth_signal_model, vanderpol_model};
    use nalgebra::{DMatrix, DVector};

    fn sine_model() -> crate::model::LinearStateSpace {
        let mut m = smooth_signal_model(6, 0.4, 1.0, 0.25).unwrap();
        for (i, s) in m.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (0.4 * (i + 1) as f64).sin());
        }
        m.init_mean = DVector::from_column_slice(&[1.0, 0.0]);
        m
    }

    #[test]
    fn affine_model_converges_in_one_iteration() {
        let lm = sine_model();
        let nl = lm.as_nonlinear();
        let (sol, trace) = smooth_nonlinear(&nl, None, &GnOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(trace.iters.len() <= 1, "affine model took {} iterations", trace.iters.len());
        let direct = linear::smooth(&lm).unwrap();
        assert!((sol.x.as_dvector() - direct.x.as_dvector()).norm() < 1e-10);
    }

    #[test]
    fn direction_vanishes_at_stationary_point() {
        let lm = sine_model();
        let nl = lm.as_nonlinear();
        let xstar = linear::smooth(&lm).unwrap().x;
        let (d, dmodel) = gn_direction(&nl, &xstar).unwrap();
        assert!(d.norm() <= 1e-8);
        assert!(dmodel.abs() <= 1e-12);
    }

    #[test]
    fn affine_direction_from_zero_is_linear_solution() {
        let lm = sine_model();
        let nl = lm.as_nonlinear();
        let zero = BlockVector::zeros(2, 6);
        let (d, dmodel) = gn_direction(&nl, &zero).unwrap();
        let direct = linear::smooth(&lm).unwrap();
        assert!((d.as_dvector() - direct.x.as_dvector()).norm() < 1e-10);
        assert!(dmodel < 0.0);
    }

    #[test]
    fn vanderpol_direction_decreases_model() {
        let model = vanderpol_model(
            2.0,
            20,
            0.375,
            DMatrix::identity(2, 2) * 0.1,
            0.01,
            DVector::from_column_slice(&[0.0, -0.5]),
            DVector::from_column_slice(&[0.1, -0.4]),
            1.0,
        )
        .unwrap();
        // measurement-seeded trajectory: first component from z, second zero
        let mut model = model;
        for (i, z) in model.meas_val.iter_mut().enumerate() {
            z[0] = (0.3 * i as f64).sin();
        }
        let mut x = BlockVector::zeros(2, 20);
        for k in 0..20 {
            x.set_block(k, &DVector::from_column_slice(&[model.meas_val[k][0], 0.0]));
        }
        let cov = CovCache::from_nonlinear(&model).unwrap();
        let lin = model.linearize(&x).unwrap();
        let (d, dmodel) = gn_direction(&model, &x).unwrap();
        assert!(dmodel < 0.0);
        // the reported decrease matches direct evaluation of the linearized objective
        let f_lin = linearized_objective(&lin, &cov, &d);
        let f_x = nl_objective(&model, &x).unwrap();
        assert!((dmodel - (f_lin - f_x)).abs() <= 1e-9 * (1.0 + f_x.abs()));
    }

    #[test]
    fn armijo_accepts_full_step_on_exact_quadratic() {
        // f(x) = 1/2 |x|^2 on a 1-block vector, d = -x is the Newton step
        let f = |x: &BlockVector| Ok(0.5 * x.norm().powi(2));
        let x = BlockVector::from_flat(2, DVector::from_column_slice(&[3.0, -4.0])).unwrap();
        let d = &x * -1.0;
        let dmodel = -0.5 * x.norm().powi(2); // exact model: f(x+d) - f(x)
        let (gamma, s) = armijo_search(f, &x, &d, dmodel, &GnOptions::default()).unwrap();
        assert_eq!(s, 0);
        assert_eq!(gamma, 1.0);
    }

    #[test]
    fn armijo_backtracks_on_overshoot() {
        // f quadratic, d = 3x the Newton step scaled by -3: overshoots
        let f = |x: &BlockVector| Ok(0.5 * x.norm().powi(2));
        let x = BlockVector::from_flat(1, DVector::from_element(1, 2.0)).unwrap();
        let d = &x * -3.0;
        // model decrease from the quadratic model along the exact direction
        let dmodel = -0.5 * x.norm().powi(2);
        let (gamma, s) = armijo_search(f, &x, &d, dmodel, &GnOptions::default()).unwrap();
        assert!(s >= 1, "expected at least one backtrack, got gamma = {gamma}");
        // check the accepted step satisfies the inequality
        let mut trial = x.clone();
        trial.axpy(gamma, &d);
        assert!(f(&trial).unwrap() <= f(&x).unwrap() + 1e-3 * gamma * dmodel);
    }

    #[test]
    fn armijo_flat_then_drop_exercises_backtracking() {
        // flat for gamma >= 0.3, then linear decrease: s = 0, 1 rejected
        let x = BlockVector::from_flat(1, DVector::from_element(1, 0.0)).unwrap();
        let d = BlockVector::from_flat(1, DVector::from_element(1, 1.0)).unwrap();
        let f = |y: &BlockVector| {
            let gamma = y.as_dvector()[0];
            Ok(if gamma >= 0.3 { 0.0 } else { -gamma })
        };
        let (gamma, s) = armijo_search(f, &x, &d, -1.0, &GnOptions::default()).unwrap();
        assert_eq!(s, 2);
        assert!((gamma - 0.25).abs() < 1e-15);
    }

    #[test]
    fn armijo_fails_on_flat_function() {
        let x = BlockVector::from_flat(1, DVector::from_element(1, 0.0)).unwrap();
        let d = BlockVector::from_flat(1, DVector::from_element(1, 1.0)).unwrap();
        let f = |_: &BlockVector| Ok(5.0);
        let opts = GnOptions { max_backtracks: 8, ..Default::default() };
        match armijo_search(f, &x, &d, -1.0, &opts) {
            Err(Error::LineSearchFailed { backtracks }) => assert_eq!(backtracks, 8),
            other => panic!("expected line search failure, got {other:?}"),
        }
    }

    #[test]
    fn vanderpol_smoother_descends_monotonically() {
        let mut model = vanderpol_model(
            2.0,
            30,
            0.375,
            DMatrix::identity(2, 2) * 0.1,
            0.01,
            DVector::from_column_slice(&[0.0, -0.5]),
            DVector::from_column_slice(&[0.1, -0.4]),
            1.0,
        )
        .unwrap();
        // measurements of the first component along the true orbit, with a
        // deterministic pseudo-noise pattern
        let mut cur = model.x0.clone();
        for (i, z) in model.meas_val.iter_mut().enumerate() {
            cur = model.transition.eval(i + 1, &cur);
            z[0] = cur[0] + 0.8 * ((13 * i % 7) as f64 / 3.0 - 1.0);
        }
        let (sol, trace) = smooth_nonlinear(&model, None, &GnOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        for w in trace.iters.windows(2) {
            assert!(w[1].objective < w[0].objective, "objective not strictly decreasing");
        }
        assert!(trace.final_objective < trace.iters[0].objective);
        // replay the Armijo inequality from the trace
        for (i, it) in trace.iters.iter().enumerate() {
            let next_obj =
                trace.iters.get(i + 1).map(|n| n.objective).unwrap_or(trace.final_objective);
            assert!(
                next_obj <= it.objective + 1e-3 * it.step * it.model_decrease + 1e-12,
                "iterate {i} violates the Armijo inequality on replay"
            );
        }
    }
}
