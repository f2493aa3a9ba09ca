//! Linear-Gaussian smoother: assemble the normal equations of the quadratic
//! MAP problem and solve them with the block-tridiagonal kernel.
//!
//! The objective is
//! `f(x) = 1/2 |Hx - z|^2_{R^-1} + 1/2 |Gx - w|^2_{Q^-1}`
//! with `G` unit lower block-bidiagonal. In normal-equation form this is
//! `f(x) = 1/2 x^T C x - c^T x + const` with
//!
//! * `C_k = Q_k^-1 + G_{k+1}^T Q_{k+1}^-1 G_{k+1} + H_k^T R_k^-1 H_k`
//!   (the `G_{N+1}` term is absent at `k = N`),
//! * sub-diagonal `A_k = -Q_k^-1 G_k`,
//! * `c = H^T R^-1 z + G^T Q^-1 w`.
//!
//! Note the sign convention: we keep `c` on the minus side of the quadratic,
//! so the gradient is `Cx - c` everywhere in this crate.
//!
//! The forward elimination of the solve produces the information-form filter
//! quantities along the way: `d_k = P_k|k^-1 + G_{k+1}^T Q_{k+1}^-1 G_{k+1}`
//! and `s_k = P_k|k^-1 x_k|k`, which is what [`filter_estimates`] extracts.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::blocktri::{BlockTriMatrix, BlockVector, ForwardFactor};
use crate::model::{LinearStateSpace, Linearization, NonlinearStateSpace};
use crate::{Error, Result};

/// Cached Cholesky factorizations of the per-step covariances.
#[derive(Clone)]
pub(crate) struct CovCache {
    pub q: Vec<Cholesky<f64, Dyn>>,
    /// `R_k` factors; `None` where `m(k) = 0`.
    pub r: Vec<Option<Cholesky<f64, Dyn>>>,
}

impl CovCache {
    pub fn new(proc_cov: &[DMatrix<f64>], meas_cov: &[DMatrix<f64>]) -> Result<Self> {
        let q = proc_cov
            .iter()
            .enumerate()
            .map(|(k, m)| {
                Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite { block: k + 1 })
            })
            .collect::<Result<_>>()?;
        let r = meas_cov
            .iter()
            .enumerate()
            .map(|(k, m)| {
                if m.nrows() == 0 {
                    Ok(None)
                } else {
                    Cholesky::new(m.clone())
                        .map(Some)
                        .ok_or(Error::NotPositiveDefinite { block: k + 1 })
                }
            })
            .collect::<Result<_>>()?;
        Ok(CovCache { q, r })
    }

    pub fn from_linear(model: &LinearStateSpace) -> Result<Self> {
        let qs: Vec<_> = model.steps.iter().map(|s| s.proc_cov.clone()).collect();
        let rs: Vec<_> = model.steps.iter().map(|s| s.meas_cov.clone()).collect();
        Self::new(&qs, &rs)
    }

    pub fn from_nonlinear(model: &NonlinearStateSpace) -> Result<Self> {
        Self::new(&model.proc_cov, &model.meas_cov)
    }

    pub fn q_inv(&self, k: usize, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.q[k].solve(v)
    }
}

/// Normal equations `min 1/2 x^T C x - c^T x + offset` of a Gaussian
/// smoothing problem.
#[derive(Clone)]
pub struct NormalSystem {
    pub matrix: BlockTriMatrix,
    pub rhs: BlockVector,
    /// Constant so that the quadratic equals the residual-form objective.
    pub offset: f64,
}

impl NormalSystem {
    /// `1/2 x^T C x - c^T x + offset`.
    pub fn quadratic(&self, x: &BlockVector) -> Result<f64> {
        let cx = self.matrix.mul_vec(x)?;
        Ok(0.5 * cx.dot(x) - self.rhs.dot(x) + self.offset)
    }

    /// Gradient `Cx - c`.
    pub fn gradient(&self, x: &BlockVector) -> Result<BlockVector> {
        let mut g = self.matrix.mul_vec(x)?;
        g.axpy(-1.0, &self.rhs);
        Ok(g)
    }
}

/// The pieces of a stacked affine least-squares problem, independent of how
/// they were produced (a linear model or a linearization of a nonlinear one).
pub(crate) struct AffineParts<'a> {
    /// `G_k` for `k = 2..N`.
    pub trans: &'a [DMatrix<f64>],
    /// `H_k` for `k = 1..N`.
    pub meas: &'a [DMatrix<f64>],
    pub cov: &'a CovCache,
    /// Stacked process offset `w` (general; all blocks may be nonzero).
    pub w: &'a BlockVector,
    /// Per-step measurement vector.
    pub z: &'a [DVector<f64>],
}

pub(crate) fn assemble_parts(parts: &AffineParts<'_>) -> Result<NormalSystem> {
    let len = parts.meas.len();
    let n = parts.w.block_dim();
    if parts.trans.len() + 1 != len || parts.w.len() != len || parts.z.len() != len {
        return Err(Error::ShapeMismatch("inconsistent stacked model".into()));
    }

    let mut diag = Vec::with_capacity(len);
    let mut sub = Vec::with_capacity(len.saturating_sub(1));
    let mut rhs = BlockVector::zeros(n, len);
    let mut offset = 0.0;

    for k in 0..len {
        // C_k = Q_k^-1 + G_{k+1}^T Q_{k+1}^-1 G_{k+1} + H_k^T R_k^-1 H_k
        let mut ck = parts.cov.q_inv(k, &DMatrix::identity(n, n));
        if k + 1 < len {
            let g_next = &parts.trans[k];
            let qinv_g = parts.cov.q[k + 1].solve(g_next);
            ck += g_next.transpose() * &qinv_g;
            // sub-diagonal block A_{k+1} = -Q_{k+1}^-1 G_{k+1}
            sub.push(-qinv_g);
        }
        // c_k = H_k^T R_k^-1 z_k + (G^T Q^-1 w)_k
        let qinv_w = parts.cov.q[k].solve(&parts.w.block_owned(k));
        offset += 0.5 * parts.w.block(k).dot(&qinv_w);
        let mut ci = qinv_w;
        if k + 1 < len {
            let qinv_w_next = parts.cov.q[k + 1].solve(&parts.w.block_owned(k + 1));
            ci -= parts.trans[k].transpose() * qinv_w_next;
        }
        let h = &parts.meas[k];
        if h.nrows() > 0 {
            let r = parts.cov.r[k].as_ref().expect("nonempty measurement needs R factor");
            ck += h.transpose() * r.solve(h);
            let rinv_z = r.solve(&parts.z[k]);
            offset += 0.5 * parts.z[k].dot(&rinv_z);
            ci += h.transpose() * rinv_z;
        }
        rhs.set_block(k, &ci);
        diag.push(ck);
    }

    Ok(NormalSystem { matrix: BlockTriMatrix::new(diag, sub)?, rhs, offset })
}

fn linear_parts(model: &LinearStateSpace) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, CovCache, BlockVector, Vec<DVector<f64>>)> {
    model.validate()?;
    let cov = CovCache::from_linear(model)?;
    let trans: Vec<_> = model.steps.iter().skip(1).map(|s| s.trans.clone()).collect();
    let meas: Vec<_> = model.steps.iter().map(|s| s.meas.clone()).collect();
    let mut w = BlockVector::zeros(model.state_dim(), model.horizon());
    w.set_block(0, &model.init_mean);
    let z: Vec<_> = model.steps.iter().map(|s| s.meas_val.clone()).collect();
    Ok((trans, meas, cov, w, z))
}

/// Build the normal equations for a linear-Gaussian model.
pub fn assemble(model: &LinearStateSpace) -> Result<NormalSystem> {
    let (trans, meas, cov, w, z) = linear_parts(model)?;
    assemble_parts(&AffineParts { trans: &trans, meas: &meas, cov: &cov, w: &w, z: &z })
}

/// Assemble the Gauss-Newton subproblem normal equations at a linearization.
pub(crate) fn assemble_linearization(
    lin: &Linearization,
    cov: &CovCache,
) -> Result<NormalSystem> {
    assemble_parts(&AffineParts {
        trans: &lin.trans,
        meas: &lin.meas,
        cov,
        w: &lin.w_shift,
        z: &lin.z_shift,
    })
}

/// Solver outcome status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterReached,
}

/// One iteration record of an iterative solver.
#[derive(Debug, Clone, Copy)]
pub struct IterRecord {
    pub objective: f64,
    pub residual: f64,
    pub step: f64,
}

/// State trajectory estimate plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct SmootherSolution {
    pub x: BlockVector,
    pub objective: f64,
    /// Relative gradient norm `|Cx - c| / (1 + |c|)` of the final quadratic
    /// subproblem (or of the full problem when it is quadratic).
    pub residual_norm: f64,
    pub iterations: Vec<IterRecord>,
    pub status: SolveStatus,
}

/// Solve the linear-Gaussian MAP problem.
pub fn smooth(model: &LinearStateSpace) -> Result<SmootherSolution> {
    let sys = assemble(model)?;
    let (x, _) = sys.matrix.solve(&sys.rhs)?;
    let grad = sys.gradient(&x)?;
    let residual_norm = grad.norm() / (1.0 + sys.rhs.norm());
    let objective = objective(model, &x)?;
    Ok(SmootherSolution {
        x,
        objective,
        residual_norm,
        iterations: Vec::new(),
        status: SolveStatus::Converged,
    })
}

/// Filtered estimates `x_k|k` for every step, extracted from the forward
/// factor: `P_k|k^-1 = d_k - G_{k+1}^T Q_{k+1}^-1 G_{k+1}` (no correction at
/// `k = N`) and `x_k|k = P_k|k s_k`.
pub fn filter_estimates(model: &LinearStateSpace) -> Result<Vec<DVector<f64>>> {
    let (trans, meas, cov, w, z) = linear_parts(model)?;
    let sys =
        assemble_parts(&AffineParts { trans: &trans, meas: &meas, cov: &cov, w: &w, z: &z })?;
    let (_, factor) = sys.matrix.solve(&sys.rhs)?;
    let len = model.horizon();
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let mut info = factor.pivot(k).clone();
        if k + 1 < len {
            let g_next = &trans[k];
            let qinv_g = cov.q[k + 1].solve(g_next);
            info -= g_next.transpose() * qinv_g;
        }
        let chol = Cholesky::new(info).ok_or(Error::NotPositiveDefinite { block: k + 1 })?;
        out.push(chol.solve(&factor.transformed_rhs().block_owned(k)));
    }
    Ok(out)
}

/// Residual-form objective `1/2 |Hx - z|^2_{R^-1} + 1/2 |Gx - w|^2_{Q^-1}`.
pub fn objective(model: &LinearStateSpace, x: &BlockVector) -> Result<f64> {
    if x.block_dim() != model.state_dim() || x.len() != model.horizon() {
        return Err(Error::ShapeMismatch("trajectory does not match model".into()));
    }
    let cov = CovCache::from_linear(model)?;
    let mut total = 0.0;
    for (k, step) in model.steps.iter().enumerate() {
        let proc_res = if k == 0 {
            x.block_owned(0) - &model.init_mean
        } else {
            x.block_owned(k) - &step.trans * x.block(k - 1)
        };
        total += 0.5 * proc_res.dot(&cov.q[k].solve(&proc_res));
        if step.meas.nrows() > 0 {
            let meas_res = &step.meas * x.block(k) - &step.meas_val;
            let r = cov.r[k].as_ref().expect("R factor present");
            total += 0.5 * meas_res.dot(&r.solve(&meas_res));
        }
    }
    Ok(total)
}

/// Forward factor of the assembled normal equations; the information-form
/// intermediates used by [`filter_estimates`] and exposed for tests.
pub fn forward_factor(model: &LinearStateSpace) -> Result<(BlockVector, ForwardFactor)> {
    let sys = assemble(model)?;
    sys.matrix.solve(&sys.rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::smooth_signal_model;

    /// n=1, N=1 model with G=H=I, Q=R=1: two equal quadratic pulls.
    fn tiny_model(z: f64) -> LinearStateSpace {
        LinearStateSpace {
            init_mean: DVector::zeros(1),
            steps: vec![crate::model::LinearStep {
                trans: DMatrix::identity(1, 1),
                proc_cov: DMatrix::identity(1, 1),
                meas: DMatrix::identity(1, 1),
                meas_cov: DMatrix::identity(1, 1),
                meas_val: DVector::from_element(1, z),
            }],
        }
    }

    #[test]
    fn single_step_balances_prior_and_measurement() {
        let model = tiny_model(3.0);
        let sys = assemble(&model).unwrap();
        assert!((sys.matrix.diag_block(0)[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((sys.rhs.as_dvector()[0] - 3.0).abs() < 1e-14);
        let sol = smooth(&model).unwrap();
        assert!((sol.x.as_dvector()[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn two_step_scalar_assembly_by_hand() {
        // n=1, N=2, all 1x1 identity, Q=R=1 -> C = [[3,-1],[-1,2]]
        let step = crate::model::LinearStep {
            trans: DMatrix::identity(1, 1),
            proc_cov: DMatrix::identity(1, 1),
            meas: DMatrix::identity(1, 1),
            meas_cov: DMatrix::identity(1, 1),
            meas_val: DVector::zeros(1),
        };
        let model = LinearStateSpace {
            init_mean: DVector::zeros(1),
            steps: vec![step.clone(), step],
        };
        let sys = assemble(&model).unwrap();
        let dense = sys.matrix.to_dense();
        let want = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, -1.0, 2.0]);
        assert!((dense - want).norm() < 1e-14);
    }

    #[test]
    fn zero_measurements_zero_prior_gives_zero() {
        let model = smooth_signal_model(6, 0.3, 1.0, 0.5).unwrap();
        let sol = smooth(&model).unwrap();
        assert!(sol.x.norm() < 1e-12);
        assert!(sol.objective.abs() < 1e-14);
    }

    #[test]
    fn objective_zero_at_zero_with_zero_data() {
        let model = smooth_signal_model(4, 0.3, 1.0, 0.5).unwrap();
        let x = BlockVector::zeros(2, 4);
        assert_eq!(objective(&model, &x).unwrap(), 0.0);
    }

    #[test]
    fn objective_matches_quadratic_identity() {
        let mut model = smooth_signal_model(5, 0.25, 1.3, 0.4).unwrap();
        model.init_mean = DVector::from_column_slice(&[0.3, -0.2]);
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (i as f64 * 0.7).sin());
        }
        let sys = assemble(&model).unwrap();
        // f(x) = 1/2 x^T C x - c^T x + offset on a few arbitrary points
        for seed in 0..5 {
            let x = BlockVector::from_flat(
                2,
                DVector::from_iterator(10, (0..10).map(|i| ((seed * 10 + i) as f64 * 0.37).cos())),
            )
            .unwrap();
            let direct = objective(&model, &x).unwrap();
            let quad = sys.quadratic(&x).unwrap();
            assert!(
                (direct - quad).abs() <= 1e-12 * (1.0 + direct.abs()),
                "direct {direct} vs quadratic {quad}"
            );
        }
    }

    #[test]
    fn solution_is_local_minimum() {
        let mut model = smooth_signal_model(5, 0.2, 1.0, 0.3).unwrap();
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (i as f64).sin());
        }
        let sol = smooth(&model).unwrap();
        let f0 = objective(&model, &sol.x).unwrap();
        for i in 0..10 {
            let mut bumped = sol.x.clone();
            let mut b = bumped.block_owned(i % 5);
            b[i % 2] += if i % 3 == 0 { 1e-3 } else { -1e-3 };
            bumped.set_block(i % 5, &b);
            assert!(objective(&model, &bumped).unwrap() >= f0);
        }
    }

    #[test]
    fn gradient_small_at_solution() {
        let mut model = smooth_signal_model(8, 0.4, 0.8, 0.6).unwrap();
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (0.5 * i as f64).cos());
        }
        let sol = smooth(&model).unwrap();
        assert!(sol.residual_norm <= 1e-8);
    }

    #[test]
    fn filter_matches_smoother_at_last_step_and_single_step() {
        let mut model = smooth_signal_model(7, 0.3, 1.0, 0.35 * 0.35).unwrap();
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (0.4 * i as f64).sin() + 0.1);
        }
        let filt = filter_estimates(&model).unwrap();
        let sol = smooth(&model).unwrap();
        assert!((filt[6].clone() - sol.x.block_owned(6)).norm() < 1e-10);

        let single = LinearStateSpace {
            init_mean: model.init_mean.clone(),
            steps: vec![model.steps[0].clone()],
        };
        let f1 = filter_estimates(&single).unwrap();
        let s1 = smooth(&single).unwrap();
        assert!((f1[0].clone() - s1.x.block_owned(0)).norm() < 1e-12);
    }
}
