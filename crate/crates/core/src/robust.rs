//! Robust smoothing under heavy-tailed (Laplace) measurement noise.
//!
//! The MAP objective swaps the Gaussian measurement term for a weighted
//! one-norm:
//!
//! ```text
//! f(x) = 1/2 |g(x) - w|^2_{Q^-1} + sqrt(2) |R^{-1/2} (h(x) - z)|_1
//! ```
//!
//! Gauss-Newton on this convex composite needs a direction subproblem of the
//! form `min_d 1/2 d^T C d + c^T d + sqrt(2) |B d + b|_1` with
//! `C = G^T Q^-1 G`, `c = -G^T Q^-1 w`, `B = R^{-1/2} H`, `b = -R^{-1/2} z`.
//! Splitting `Bd + b = p+ - p-` with `p+, p- >= 0` turns it into a convex QP
//! whose KKT system couples `(p+, p-, s+, s-, d)`; the sign multipliers obey
//! `s+ + s- = 2 sqrt(2)` at optimality. Eliminating everything but `d` leaves
//! `C + B^T T^-1 B` with `T = diag(p+)/s+ + diag(p-)/s-`, which is again
//! block tridiagonal.

use nalgebra::{DMatrix, DVector};

use crate::blocktri::{BlockTriMatrix, BlockVector};
use crate::linear::{CovCache, IterRecord, SmootherSolution, SolveStatus};
use crate::model::{Linearization, NonlinearStateSpace};
use crate::nonlinear::{armijo_search, GnIter, GnOptions, GnTrace};
use crate::{Error, Result};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// The robust direction subproblem
/// `min_d 1/2 d^T C d + c^T d + sqrt(2) |B d + b|_1`.
#[derive(Clone)]
pub struct L1Qp {
    pub c_mat: BlockTriMatrix,
    pub c_vec: BlockVector,
    /// Per-step whitened measurement rows `B_k = R_k^{-1/2} H_k`.
    pub b_blocks: Vec<DMatrix<f64>>,
    /// Per-step offsets `b_k = -R_k^{-1/2} z_k`.
    pub b_offsets: Vec<DVector<f64>>,
}

impl L1Qp {
    pub fn total_rows(&self) -> usize {
        self.b_blocks.iter().map(|b| b.nrows()).sum()
    }

    fn apply_b(&self, d: &BlockVector) -> DVector<f64> {
        let mut out = DVector::zeros(self.total_rows());
        let mut at = 0;
        for (k, b) in self.b_blocks.iter().enumerate() {
            if b.nrows() > 0 {
                out.rows_mut(at, b.nrows()).copy_from(&(b * d.block(k)));
                at += b.nrows();
            }
        }
        out
    }

    fn apply_bt(&self, v: &DVector<f64>) -> BlockVector {
        let n = self.c_mat.block_dim();
        let mut out = BlockVector::zeros(n, self.b_blocks.len());
        let mut at = 0;
        for (k, b) in self.b_blocks.iter().enumerate() {
            if b.nrows() > 0 {
                out.set_block(k, &(b.transpose() * v.rows(at, b.nrows())));
                at += b.nrows();
            }
        }
        out
    }

    fn stacked_offset(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.total_rows());
        let mut at = 0;
        for b in &self.b_offsets {
            out.rows_mut(at, b.len()).copy_from(b);
            at += b.len();
        }
        out
    }

    /// Subproblem objective `1/2 d^T C d + c^T d + sqrt(2) |B d + b|_1`.
    pub fn objective(&self, d: &BlockVector) -> Result<f64> {
        let cd = self.c_mat.mul_vec(d)?;
        let l1 = (self.apply_b(d) + self.stacked_offset()).abs().sum();
        Ok(0.5 * cd.dot(d) + self.c_vec.dot(d) + SQRT2 * l1)
    }
}

/// Interior iterate of the specialized solver; all four auxiliary vectors are
/// strictly positive during the iteration.
#[derive(Debug, Clone)]
pub struct L1IpState {
    pub p_plus: DVector<f64>,
    pub p_minus: DVector<f64>,
    pub s_plus: DVector<f64>,
    pub s_minus: DVector<f64>,
    pub d: BlockVector,
    pub mu: f64,
}

/// Solver outcome for [`solve_l1_qp`].
#[derive(Debug, Clone)]
pub struct L1Solution {
    pub d: BlockVector,
    pub p_plus: DVector<f64>,
    pub p_minus: DVector<f64>,
    pub s_plus: DVector<f64>,
    pub s_minus: DVector<f64>,
    pub iterations: Vec<IterRecord>,
}

#[derive(Debug, Clone)]
pub struct L1Options {
    pub max_iter: usize,
    pub tol: f64,
    pub boundary: f64,
}

impl Default for L1Options {
    fn default() -> Self {
        L1Options { max_iter: 60, tol: 1e-6, boundary: 0.995 }
    }
}

/// The five residual blocks of the relaxed KKT map, in the order
/// `(p+ - p- - b - Bd, p-*s- - mu, s+ + s- - 2 sqrt2, p+*s+ - mu,
///   Cd + c + B^T (s- - s+)/2)`.
pub(crate) fn l1_residuals(
    qp: &L1Qp,
    st: &L1IpState,
    mu: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, BlockVector)> {
    let m = st.p_plus.len();
    let f1 = &st.p_plus - &st.p_minus - qp.stacked_offset() - qp.apply_b(&st.d);
    let f2 = DVector::from_iterator(m, (0..m).map(|i| st.p_minus[i] * st.s_minus[i] - mu));
    let f3 = DVector::from_iterator(m, (0..m).map(|i| st.s_plus[i] + st.s_minus[i] - 2.0 * SQRT2));
    let f4 = DVector::from_iterator(m, (0..m).map(|i| st.p_plus[i] * st.s_plus[i] - mu));
    let mut f5 = qp.c_mat.mul_vec(&st.d)?;
    f5.axpy(1.0, &qp.c_vec);
    let half_diff = (&st.s_minus - &st.s_plus) * 0.5;
    f5.axpy(1.0, &qp.apply_bt(&half_diff));
    Ok((f1, f2, f3, f4, f5))
}

fn fraction_to_boundary(v: &DVector<f64>, dv: &DVector<f64>, damping: f64) -> f64 {
    let mut alpha = 1.0_f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-damping * v[i] / dv[i]);
        }
    }
    alpha
}

/// One Newton step on the relaxed KKT system; exposed for the dense oracle
/// tests. Returns the raw (undamped) increments.
pub(crate) fn l1_newton_direction(
    qp: &L1Qp,
    st: &L1IpState,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, BlockVector)> {
    let m = st.p_plus.len();
    let (f1, f2, f3, f4, f5) = l1_residuals(qp, st, st.mu)?;

    // T = diag(p+)/s+ + diag(p-)/s-
    let t = DVector::from_iterator(
        m,
        (0..m).map(|i| st.p_plus[i] / st.s_plus[i] + st.p_minus[i] / st.s_minus[i]),
    );
    // u = -F1 + (F4 - P+ F3)/s+ - F2/s-
    let u = DVector::from_iterator(
        m,
        (0..m).map(|i| {
            -f1[i] + (f4[i] - st.p_plus[i] * f3[i]) / st.s_plus[i] - f2[i] / st.s_minus[i]
        }),
    );

    // (C + B^T T^-1 B) dd = -F5 - B^T F3 / 2 - B^T T^-1 u
    let mut matrix = qp.c_mat.clone();
    let mut at = 0;
    for (k, b) in qp.b_blocks.iter().enumerate() {
        let rows = b.nrows();
        if rows == 0 {
            continue;
        }
        let mut scaled = b.clone();
        for i in 0..rows {
            let w = 1.0 / t[at + i];
            for j in 0..b.ncols() {
                scaled[(i, j)] *= w;
            }
        }
        matrix.add_to_diag(k, &(b.transpose() * scaled));
        at += rows;
    }
    let tinv_u = DVector::from_iterator(m, (0..m).map(|i| u[i] / t[i]));
    let mut rhs = f5;
    rhs.axpy(0.5, &qp.apply_bt(&f3));
    rhs.axpy(1.0, &qp.apply_bt(&tinv_u));
    rhs.scale(-1.0);
    let (dd, _) = matrix.solve(&rhs)?;

    let bdd = qp.apply_b(&dd);
    let ds_minus = DVector::from_iterator(m, (0..m).map(|i| (bdd[i] + u[i]) / t[i]));
    let ds_plus = -&f3 - &ds_minus;
    let dp_minus = DVector::from_iterator(
        m,
        (0..m).map(|i| (-f2[i] - st.p_minus[i] * ds_minus[i]) / st.s_minus[i]),
    );
    let dp_plus = DVector::from_iterator(
        m,
        (0..m).map(|i| (-f4[i] - st.p_plus[i] * ds_plus[i]) / st.s_plus[i]),
    );
    Ok((dp_plus, dp_minus, ds_plus, ds_minus, dd))
}

/// Solve the robust direction subproblem by the specialized interior-point
/// elimination. Terminates when the unrelaxed KKT residual drops below
/// `opts.tol` in the infinity norm.
pub fn solve_l1_qp(qp: &L1Qp, opts: &L1Options) -> Result<L1Solution> {
    let m = qp.total_rows();
    let n = qp.c_mat.block_dim();
    let len = qp.c_mat.len();
    if qp.b_blocks.len() != len || qp.b_offsets.len() != len {
        return Err(Error::ShapeMismatch("constraint blocks do not match horizon".into()));
    }
    if m == 0 {
        // no measurements at all: plain quadratic
        let mut rhs = qp.c_vec.clone();
        rhs.scale(-1.0);
        let (d, _) = qp.c_mat.solve(&rhs)?;
        return Ok(L1Solution {
            d,
            p_plus: DVector::zeros(0),
            p_minus: DVector::zeros(0),
            s_plus: DVector::zeros(0),
            s_minus: DVector::zeros(0),
            iterations: Vec::new(),
        });
    }

    let b = qp.stacked_offset();
    let init_p = DVector::from_iterator(m, b.iter().map(|v| v.abs().max(1.0) + 1.0));
    let mut st = L1IpState {
        p_plus: init_p.clone(),
        p_minus: init_p,
        s_plus: DVector::from_element(m, SQRT2),
        s_minus: DVector::from_element(m, SQRT2),
        d: BlockVector::zeros(n, len),
        mu: 0.0,
    };
    st.mu = (st.p_plus.dot(&st.s_plus) + st.p_minus.dot(&st.s_minus)) / (2.0 * m as f64);

    let mut iterations = Vec::new();
    for iter in 0..opts.max_iter {
        let (f1, _, f3, _, f5) = l1_residuals(qp, &st, 0.0)?;
        let comp = (0..m)
            .map(|i| (st.p_plus[i] * st.s_plus[i]).max(st.p_minus[i] * st.s_minus[i]))
            .fold(0.0_f64, f64::max);
        let kkt = f1.amax().max(f3.amax()).max(f5.as_dvector().amax()).max(comp);
        iterations.push(IterRecord { objective: qp.objective(&st.d)?, residual: kkt, step: st.mu });
        if kkt <= opts.tol {
            return Ok(L1Solution {
                d: st.d,
                p_plus: st.p_plus,
                p_minus: st.p_minus,
                s_plus: st.s_plus,
                s_minus: st.s_minus,
                iterations,
            });
        }

        let (dp_plus, dp_minus, ds_plus, ds_minus, dd) = l1_newton_direction(qp, &st)?;
        let alpha = fraction_to_boundary(&st.p_plus, &dp_plus, opts.boundary)
            .min(fraction_to_boundary(&st.p_minus, &dp_minus, opts.boundary))
            .min(fraction_to_boundary(&st.s_plus, &ds_plus, opts.boundary))
            .min(fraction_to_boundary(&st.s_minus, &ds_minus, opts.boundary));
        st.p_plus += &dp_plus * alpha;
        st.p_minus += &dp_minus * alpha;
        st.s_plus += &ds_plus * alpha;
        st.s_minus += &ds_minus * alpha;
        st.d.axpy(alpha, &dd);
        if iter % 3 != 2 {
            st.mu /= 10.0;
        }
    }

    let (f1, _, f3, _, f5) = l1_residuals(qp, &st, 0.0)?;
    Err(Error::MaxIterReached {
        iters: opts.max_iter,
        residual: f1.amax().max(f3.amax()).max(f5.as_dvector().amax()),
    })
}

/// Whiten `v` by the lower Cholesky factor of the step-`k` measurement
/// covariance.
fn whiten(cov: &CovCache, k: usize, v: &DVector<f64>) -> DVector<f64> {
    let l = cov.r[k].as_ref().expect("measurement present").l();
    l.solve_lower_triangular(v).expect("cholesky factor is nonsingular")
}

fn whiten_mat(cov: &CovCache, k: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let l = cov.r[k].as_ref().expect("measurement present").l();
    l.solve_lower_triangular(m).expect("cholesky factor is nonsingular")
}

/// Build the robust subproblem from a linearization: `C = G^T Q^-1 G`,
/// `c = -G^T Q^-1 w_shift`, `B_k = R_k^{-1/2} H_k`, `b_k = -R_k^{-1/2} z_shift_k`.
pub(crate) fn build_l1_qp(lin: &Linearization, cov: &CovCache) -> Result<L1Qp> {
    let len = lin.meas.len();
    let n = lin.w_shift.block_dim();
    let mut diag = Vec::with_capacity(len);
    let mut sub = Vec::with_capacity(len.saturating_sub(1));
    let mut c_vec = BlockVector::zeros(n, len);
    for k in 0..len {
        let mut ck = cov.q_inv(k, &DMatrix::identity(n, n));
        if k + 1 < len {
            let g_next = &lin.trans[k];
            let qinv_g = cov.q[k + 1].solve(g_next);
            ck += g_next.transpose() * &qinv_g;
            sub.push(-qinv_g);
        }
        diag.push(ck);

        // c = -G^T Q^-1 w
        let qinv_w = cov.q[k].solve(&lin.w_shift.block_owned(k));
        let mut ci = -qinv_w;
        if k + 1 < len {
            let qinv_w_next = cov.q[k + 1].solve(&lin.w_shift.block_owned(k + 1));
            ci += lin.trans[k].transpose() * qinv_w_next;
        }
        c_vec.set_block(k, &ci);
    }
    let mut b_blocks = Vec::with_capacity(len);
    let mut b_offsets = Vec::with_capacity(len);
    for k in 0..len {
        if lin.meas[k].nrows() == 0 {
            b_blocks.push(DMatrix::zeros(0, n));
            b_offsets.push(DVector::zeros(0));
        } else {
            b_blocks.push(whiten_mat(cov, k, &lin.meas[k]));
            b_offsets.push(-whiten(cov, k, &lin.z_shift[k]));
        }
    }
    Ok(L1Qp { c_mat: BlockTriMatrix::new(diag, sub)?, c_vec, b_blocks, b_offsets })
}

/// Robust objective
/// `1/2 |g(x) - w|^2_{Q^-1} + sqrt(2) |R^{-1/2}(h(x) - z)|_1`.
pub fn l1_objective(model: &NonlinearStateSpace, x: &BlockVector) -> Result<f64> {
    let cov = CovCache::from_nonlinear(model)?;
    l1_objective_cached(model, &cov, x)
}

pub(crate) fn l1_objective_cached(
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
        if cov.r[k].is_some() {
            let meas_res = &h[k] - &model.meas_val[k];
            total += SQRT2 * whiten(cov, k, &meas_res).abs().sum();
        }
    }
    Ok(total)
}

/// Linearized robust objective at displacement `d`; equals the true objective
/// at `d = 0`.
fn robust_linearized_objective(lin: &Linearization, cov: &CovCache, d: &BlockVector) -> f64 {
    let len = lin.meas.len();
    let mut total = 0.0;
    for k in 0..len {
        let proc_res = if k == 0 {
            d.block_owned(0) - lin.w_shift.block_owned(0)
        } else {
            d.block_owned(k) - &lin.trans[k - 1] * d.block(k - 1) - lin.w_shift.block_owned(k)
        };
        total += 0.5 * proc_res.dot(&cov.q[k].solve(&proc_res));
        if cov.r[k].is_some() {
            let meas_res = &lin.meas[k] * d.block(k) - &lin.z_shift[k];
            total += SQRT2 * whiten(cov, k, &meas_res).abs().sum();
        }
    }
    total
}

/// Gauss-Newton smoother for the robust objective. Affine models converge in
/// a single outer iteration.
pub fn smooth_l1_laplace(
    model: &NonlinearStateSpace,
    x_init: Option<BlockVector>,
    gn_opts: &GnOptions,
    qp_opts: &L1Options,
) -> Result<(SmootherSolution, GnTrace)> {
    let cov = CovCache::from_nonlinear(model)?;
    let mut x = match x_init {
        Some(x0) => x0,
        None => crate::nonlinear::propagate_init(model),
    };
    let mut fx = l1_objective_cached(model, &cov, &x)?;
    let tol = gn_opts.tol.unwrap_or(1e-8 * (1.0 + fx));

    let mut trace = GnTrace::default();
    let mut status = SolveStatus::MaxIterReached;
    let mut last_dmodel = f64::INFINITY;

    for _ in 0..gn_opts.max_iter {
        let lin = model.linearize(&x)?;
        let qp = build_l1_qp(&lin, &cov)?;
        let sub = solve_l1_qp(&qp, qp_opts)?;
        let d = sub.d;
        let f_lin_d = robust_linearized_objective(&lin, &cov, &d);
        let dmodel = (f_lin_d - fx).min(0.0);
        last_dmodel = dmodel;
        if dmodel.abs() <= tol {
            status = SolveStatus::Converged;
            break;
        }
        let (gamma, backtracks) =
            armijo_search(|y| l1_objective_cached(model, &cov, y), &x, &d, dmodel, gn_opts)?;
        trace.iters.push(GnIter { objective: fx, model_decrease: dmodel, step: gamma, backtracks });
        x.axpy(gamma, &d);
        fx = l1_objective_cached(model, &cov, &x)?;
    }
    trace.final_objective = fx;

    let iterations = trace
        .iters
        .iter()
        .map(|it| IterRecord {
            objective: it.objective,
            residual: it.model_decrease.abs(),
            step: it.step,
        })
        .collect();
    Ok((
        SmootherSolution {
            x,
            objective: fx,
            residual_norm: last_dmodel.abs(),
            iterations,
            status,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::smooth_signal_model;

    fn scalar_qp(c: f64, cv: f64, b: f64, off: f64) -> L1Qp {
        L1Qp {
            c_mat: BlockTriMatrix::new(vec![DMatrix::from_element(1, 1, c)], vec![]).unwrap(),
            c_vec: BlockVector::from_flat(1, DVector::from_element(1, cv)).unwrap(),
            b_blocks: vec![DMatrix::from_element(1, 1, b)],
            b_offsets: vec![DVector::from_element(1, off)],
        }
    }

    #[test]
    fn scalar_toy_soft_threshold() {
        // min 1/2 d^2 + sqrt2 |d - 1|  ->  d = 1 (kink is the minimizer
        // because |d'| = 1 < sqrt2 there)
        let qp = scalar_qp(1.0, 0.0, 1.0, -1.0);
        let sol = solve_l1_qp(&qp, &L1Options::default()).unwrap();
        assert!(
            (sol.d.as_dvector()[0] - 1.0).abs() < 1e-6,
            "got {}",
            sol.d.as_dvector()[0]
        );
    }

    #[test]
    fn scalar_toy_interior_solution() {
        // min 1/2 d^2 - 4 d + sqrt2 |d| -> first-order: d - 4 + sqrt2 = 0
        let qp = scalar_qp(1.0, -4.0, 1.0, 0.0);
        let sol = solve_l1_qp(&qp, &L1Options::default()).unwrap();
        assert!((sol.d.as_dvector()[0] - (4.0 - SQRT2)).abs() < 1e-6);
    }

    #[test]
    fn sign_split_and_complementarity_hold() {
        let qp = scalar_qp(2.0, 1.0, 1.5, -0.7);
        let sol = solve_l1_qp(&qp, &L1Options::default()).unwrap();
        let bd = qp.apply_b(&sol.d) + qp.stacked_offset();
        let split = &sol.p_plus - &sol.p_minus;
        assert!((bd - split).amax() < 1e-6);
        // s+ + s- = 2 sqrt2 and p+ o p- ~ 0 at convergence
        for i in 0..sol.p_plus.len() {
            assert!((sol.s_plus[i] + sol.s_minus[i] - 2.0 * SQRT2).abs() < 1e-8);
            assert!(sol.p_plus[i] * sol.p_minus[i] < 1e-4 * (1.0 + bd_abs(&qp, &sol)));
        }
    }

    fn bd_abs(qp: &L1Qp, sol: &L1Solution) -> f64 {
        (qp.apply_b(&sol.d) + qp.stacked_offset()).amax()
    }

    #[test]
    fn newton_direction_matches_dense_jacobian() {
        // assemble the full 5-block Newton system densely and check the
        // eliminated direction satisfies it
        let mut model = smooth_signal_model(3, 0.4, 1.0, 0.5).unwrap();
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, 1.0 + i as f64);
        }
        let nl = model.as_nonlinear();
        let cov = CovCache::from_nonlinear(&nl).unwrap();
        let lin = nl.linearize(&BlockVector::zeros(2, 3)).unwrap();
        let qp = build_l1_qp(&lin, &cov).unwrap();
        let m = qp.total_rows();
        let nn = qp.c_mat.block_dim() * qp.c_mat.len();

        let st = L1IpState {
            p_plus: DVector::from_iterator(m, (0..m).map(|i| 1.0 + 0.3 * i as f64)),
            p_minus: DVector::from_iterator(m, (0..m).map(|i| 2.0 - 0.4 * i as f64)),
            s_plus: DVector::from_iterator(m, (0..m).map(|i| 0.8 + 0.1 * i as f64)),
            s_minus: DVector::from_iterator(m, (0..m).map(|i| 1.6 - 0.2 * i as f64)),
            d: BlockVector::from_flat(
                2,
                DVector::from_iterator(nn, (0..nn).map(|i| 0.1 * i as f64 - 0.2)),
            )
            .unwrap(),
            mu: 0.37,
        };
        let (dpp, dpm, dsp, dsm, dd) = l1_newton_direction(&qp, &st).unwrap();

        // dense Jacobian, variable order (p+, p-, s+, s-, d)
        let total = 4 * m + nn;
        let mut jac = DMatrix::zeros(total, total);
        let mut bd = DMatrix::zeros(m, nn);
        let mut at = 0;
        for (k, b) in qp.b_blocks.iter().enumerate() {
            bd.view_mut((at, k * 2), (b.nrows(), 2)).copy_from(b);
            at += b.nrows();
        }
        let c_dense = qp.c_mat.to_dense();
        for i in 0..m {
            jac[(i, i)] = 1.0; // dp+
            jac[(i, m + i)] = -1.0; // dp-
            for j in 0..nn {
                jac[(i, 4 * m + j)] = -bd[(i, j)];
            }
            jac[(m + i, m + i)] = st.s_minus[i];
            jac[(m + i, 3 * m + i)] = st.p_minus[i];
            jac[(2 * m + i, 2 * m + i)] = 1.0;
            jac[(2 * m + i, 3 * m + i)] = 1.0;
            jac[(3 * m + i, i)] = st.s_plus[i];
            jac[(3 * m + i, 2 * m + i)] = st.p_plus[i];
        }
        for i in 0..nn {
            for j in 0..m {
                jac[(4 * m + i, 2 * m + j)] = -0.5 * bd[(j, i)];
                jac[(4 * m + i, 3 * m + j)] = 0.5 * bd[(j, i)];
            }
            for j in 0..nn {
                jac[(4 * m + i, 4 * m + j)] = c_dense[(i, j)];
            }
        }
        let (f1, f2, f3, f4, f5) = l1_residuals(&qp, &st, st.mu).unwrap();
        let mut rhs = DVector::zeros(total);
        rhs.rows_mut(0, m).copy_from(&(-&f1));
        rhs.rows_mut(m, m).copy_from(&(-&f2));
        rhs.rows_mut(2 * m, m).copy_from(&(-&f3));
        rhs.rows_mut(3 * m, m).copy_from(&(-&f4));
        rhs.rows_mut(4 * m, nn).copy_from(&(-f5.as_dvector()));

        let mut step = DVector::zeros(total);
        step.rows_mut(0, m).copy_from(&dpp);
        step.rows_mut(m, m).copy_from(&dpm);
        step.rows_mut(2 * m, m).copy_from(&dsp);
        step.rows_mut(3 * m, m).copy_from(&dsm);
        step.rows_mut(4 * m, nn).copy_from(dd.as_dvector());

        let err = (&jac * &step - rhs).amax();
        assert!(err < 1e-9, "eliminated step violates the dense Newton system by {err}");
    }

    #[test]
    fn zero_residual_fit_reproduces_trajectory() {
        // measurements exactly consistent with a trajectory that also has
        // zero process residual: the solution reproduces it with no l1 cost
        let model = smooth_signal_model(5, 0.5, 1.0, 0.25).unwrap();
        let mut nl = model.as_nonlinear();
        // x follows the process from a chosen start; z = H x
        let start = DVector::from_column_slice(&[0.4, -0.2]);
        nl.init_mean = start.clone();
        let mut cur = start;
        let mut xs = Vec::new();
        for k in 0..5 {
            if k > 0 {
                cur = nl.transition.eval(k + 1, &cur);
            }
            xs.push(cur.clone());
            nl.meas_val[k] = DVector::from_element(1, cur[1]);
        }
        let xhat = BlockVector::from_blocks(&xs).unwrap();
        let (sol, trace) =
            smooth_l1_laplace(&nl, None, &GnOptions::default(), &L1Options::default()).unwrap();
        assert!(trace.iters.len() <= 1);
        assert!((sol.x.as_dvector() - xhat.as_dvector()).amax() < 1e-5);
        assert!(l1_objective(&nl, &xhat).unwrap() < 1e-12);
    }

    #[test]
    fn affine_model_single_outer_iteration() {
        let mut model = smooth_signal_model(6, 0.4, 1.0, 0.25).unwrap();
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (0.5 * i as f64).sin() + 0.2);
        }
        let nl = model.as_nonlinear();
        let (_, trace) =
            smooth_l1_laplace(&nl, None, &GnOptions::default(), &L1Options::default()).unwrap();
        assert!(trace.iters.len() <= 1, "affine robust smoother took {} outer iterations", trace.iters.len());
    }

    #[test]
    fn objective_unit_residual_costs_sqrt2() {
        let mut model = smooth_signal_model(3, 0.5, 1.0, 4.0).unwrap();
        // set z so that h(x) - z = -R^{1/2} e_1 at x = 0: z_1 = 2, others 0
        model.steps[0].meas_val = DVector::from_element(1, 2.0);
        let nl = model.as_nonlinear();
        let x = BlockVector::zeros(2, 3);
        let f = l1_objective(&nl, &x).unwrap();
        assert!((f - SQRT2).abs() < 1e-12, "got {f}");
    }

    #[test]
    fn objective_matches_componentwise_recomputation() {
        let mut model = smooth_signal_model(4, 0.3, 1.2, 0.49).unwrap();
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, 0.3 * i as f64 - 0.2);
        }
        model.init_mean = DVector::from_column_slice(&[0.1, 0.2]);
        let nl = model.as_nonlinear();
        let x = BlockVector::from_flat(
            2,
            DVector::from_iterator(8, (0..8).map(|i| (i as f64 * 0.9).cos())),
        )
        .unwrap();
        let f = l1_objective(&nl, &x).unwrap();

        // independent scalar recomputation
        let mut expect = 0.0;
        let sigma = 0.7; // sqrt(0.49)
        for k in 0..4 {
            let xk = x.block_owned(k);
            let prev = if k == 0 {
                nl.init_mean.clone()
            } else {
                nl.transition.eval(k + 1, &x.block_owned(k - 1))
            };
            let r = &xk - prev;
            let q = &nl.proc_cov[k];
            let qinv = q.clone().try_inverse().unwrap();
            expect += 0.5 * (r.transpose() * qinv * &r)[(0, 0)];
            let res = xk[1] - nl.meas_val[k][0];
            expect += SQRT2 * (res / sigma).abs();
        }
        assert!((f - expect).abs() < 1e-10, "objective {f} vs recomputed {expect}");
    }

    #[test]
    fn subproblem_forms_agree_at_solution() {
        // QP-form value (plus the dropped constant) equals the l1-form value
        let mut model = smooth_signal_model(5, 0.4, 1.0, 0.25).unwrap();
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (i as f64) * 0.5 - 1.0);
        }
        model.init_mean = DVector::from_column_slice(&[0.2, -0.1]);
        let nl = model.as_nonlinear();
        let cov = CovCache::from_nonlinear(&nl).unwrap();
        let lin = nl.linearize(&BlockVector::zeros(2, 5)).unwrap();
        let qp = build_l1_qp(&lin, &cov).unwrap();
        let sol = solve_l1_qp(&qp, &L1Options::default()).unwrap();

        let qp_value = qp.objective(&sol.d).unwrap();
        // dropped constant: 1/2 |w|^2_{Q^-1}
        let mut constant = 0.0;
        for k in 0..5 {
            let w = lin.w_shift.block_owned(k);
            constant += 0.5 * w.dot(&cov.q[k].solve(&w));
        }
        let direct = robust_linearized_objective(&lin, &cov, &sol.d);
        assert!(
            (qp_value + constant - direct).abs() < 1e-8 * (1.0 + direct.abs()),
            "split-form {qp_value} + {constant} vs direct {direct}"
        );
    }
}
