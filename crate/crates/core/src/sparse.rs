//! Sparsity-promoting smoothers.
//!
//! Two formulations over the same smoothing quadratic
//! `f(x) = 1/2 x^T C x - c^T x`:
//!
//! * penalized: `min f(x) + lambda |W x|_1`, solved by a primal-dual
//!   interior-point method on the slack system in `(s, r, q, p, y, x)`.
//!   After elimination the Newton matrix is `C + W Phi^-1 (Phi^2 - Psi^2) W`
//!   with `Phi = Q/s + P/r`, `Psi = Q/s - P/r` diagonal, so every step is one
//!   block-tridiagonal solve. Note `(Phi^2 - Psi^2)_ii = 4 q_i p_i / (s_i r_i)`.
//! * constrained (LASSO): `min f(x)  s.t.  |W x|_1 <= tau`, solved by
//!   spectral projected gradient: Barzilai-Borwein steps, projection onto the
//!   weighted one-norm ball, and a nonmonotone Armijo safeguard.
//!
//! `W` is a nonnegative diagonal; zero entries exempt components from the
//! penalty entirely.

use nalgebra::{DMatrix, DVector};

use crate::blocktri::BlockVector;
use crate::linear::{IterRecord, NormalSystem, SmootherSolution, SolveStatus};
use crate::{Error, Result};

/// Weighted sparsity spec: diagonal weights plus either a penalty weight or
/// a one-norm budget.
#[derive(Debug, Clone)]
pub struct SparsePenaltySpec {
    /// Diagonal of `W`, length `n * N`; entries must be nonnegative.
    pub weights: DVector<f64>,
    pub form: SparseForm,
}

#[derive(Debug, Clone, Copy)]
pub enum SparseForm {
    Penalized { lambda: f64 },
    Constrained { tau: f64 },
}

impl SparsePenaltySpec {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.weights.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "weight vector has length {}, state has {}",
                self.weights.len(),
                dim
            )));
        }
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be nonnegative".into()));
        }
        match self.form {
            SparseForm::Penalized { lambda } if lambda <= 0.0 => {
                Err(Error::InvalidParameter(format!("lambda = {lambda} must be > 0")))
            }
            SparseForm::Constrained { tau } if tau < 0.0 => {
                Err(Error::InvalidParameter(format!("tau = {tau} must be >= 0")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SparseOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub boundary: f64,
    /// Nonmonotone line-search window for the projected-gradient solver.
    pub window: usize,
}

impl Default for SparseOptions {
    fn default() -> Self {
        // the projected-gradient path takes many cheap O(n^2 N) iterations on
        // ill-conditioned smoothing quadratics; the interior-point path stops
        // after a few dozen regardless
        SparseOptions { max_iter: 20_000, tol: 1e-6, boundary: 0.995, window: 10 }
    }
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Optimality residual of the penalized problem: the fixed-point gap of one
/// unit proximal-gradient step, `|x - soft(x - (Cx - c), lambda w)|_inf`.
fn prox_residual(sys: &NormalSystem, weights: &DVector<f64>, lambda: f64, x: &BlockVector) -> Result<f64> {
    let g = sys.gradient(x)?;
    let xv = x.as_dvector();
    let gv = g.as_dvector();
    let mut worst = 0.0_f64;
    for i in 0..xv.len() {
        let stepped = soft(xv[i] - gv[i], lambda * weights[i]);
        worst = worst.max((xv[i] - stepped).abs());
    }
    Ok(worst)
}

/// Interior-point solver for `min 1/2 x^T C x - c^T x + lambda |W x|_1`.
pub fn sparse_smooth_penalized(
    sys: &NormalSystem,
    spec: &SparsePenaltySpec,
    opts: &SparseOptions,
) -> Result<SmootherSolution> {
    let n = sys.matrix.block_dim();
    let len = sys.matrix.len();
    let dim = n * len;
    spec.validate(dim)?;
    let lambda = match spec.form {
        SparseForm::Penalized { lambda } => lambda,
        SparseForm::Constrained { .. } => {
            return Err(Error::InvalidParameter(
                "penalized solver needs the penalized form".into(),
            ))
        }
    };
    let w = &spec.weights;

    // start at the unconstrained minimizer
    let (x0, _) = sys.matrix.solve(&sys.rhs)?;
    let wx = DVector::from_iterator(dim, (0..dim).map(|i| w[i] * x0.as_dvector()[i]));
    let mut x = x0;
    let mut y = DVector::from_iterator(dim, wx.iter().map(|v| v.abs() + 1.0));
    let mut s = &y - &wx;
    let mut r = &y + &wx;
    let mut q = DVector::from_element(dim, lambda / 2.0);
    let mut p = DVector::from_element(dim, lambda / 2.0);
    let mut mu = (q.dot(&s) + p.dot(&r)) / (2.0 * dim as f64);

    let mut iterations = Vec::new();
    for iter in 0..opts.max_iter {
        let res = prox_residual(sys, w, lambda, &x)?;
        iterations.push(IterRecord { objective: penalized_objective(sys, w, lambda, &x)?, residual: res, step: mu });
        if res <= opts.tol {
            let objective = iterations.last().unwrap().objective;
            return Ok(SmootherSolution {
                x,
                objective,
                residual_norm: res,
                iterations,
                status: SolveStatus::Converged,
            });
        }

        let xv = x.as_dvector().clone();
        let wxv = DVector::from_iterator(dim, (0..dim).map(|i| w[i] * xv[i]));
        let f1 = &s - &y + &wxv;
        let f2 = &r - &y - &wxv;
        let f3 = DVector::from_iterator(dim, (0..dim).map(|i| q[i] * s[i] - mu));
        let f4 = DVector::from_iterator(dim, (0..dim).map(|i| p[i] * r[i] - mu));
        let f5 = DVector::from_iterator(dim, (0..dim).map(|i| lambda - q[i] - p[i]));
        let grad = sys.gradient(&x)?;
        let f6 = DVector::from_iterator(
            dim,
            (0..dim).map(|i| w[i] * (q[i] - p[i]) + grad.as_dvector()[i]),
        );

        let phi = DVector::from_iterator(dim, (0..dim).map(|i| q[i] / s[i] + p[i] / r[i]));
        let psi = DVector::from_iterator(dim, (0..dim).map(|i| q[i] / s[i] - p[i] / r[i]));
        let gv = DVector::from_iterator(
            dim,
            (0..dim).map(|i| {
                (-f3[i] + q[i] * f1[i]) / s[i] + (-f4[i] + p[i] * f2[i]) / r[i] - f5[i]
            }),
        );
        let hv = DVector::from_iterator(
            dim,
            (0..dim).map(|i| {
                (-f3[i] + q[i] * f1[i]) / s[i] - (-f4[i] + p[i] * f2[i]) / r[i]
            }),
        );

        // Newton matrix: C + diag(w_i^2 (phi_i^2 - psi_i^2) / phi_i)
        let mut matrix = sys.matrix.clone();
        for k in 0..len {
            let mut add = DMatrix::zeros(n, n);
            for j in 0..n {
                let i = k * n + j;
                add[(j, j)] = w[i] * w[i] * (phi[i] * phi[i] - psi[i] * psi[i]) / phi[i];
            }
            matrix.add_to_diag(k, &add);
        }
        // rhs = -f6 - W h + W Psi Phi^-1 g
        let rhs_v = DVector::from_iterator(
            dim,
            (0..dim).map(|i| -f6[i] - w[i] * hv[i] + w[i] * psi[i] / phi[i] * gv[i]),
        );
        let rhs = BlockVector::from_flat(n, rhs_v)?;
        let (dx, _) = matrix.solve(&rhs)?;

        let dxv = dx.as_dvector();
        let dy = DVector::from_iterator(
            dim,
            (0..dim).map(|i| (psi[i] * w[i] * dxv[i] + gv[i]) / phi[i]),
        );
        let ds = DVector::from_iterator(dim, (0..dim).map(|i| -f1[i] + dy[i] - w[i] * dxv[i]));
        let dr = DVector::from_iterator(dim, (0..dim).map(|i| -f2[i] + dy[i] + w[i] * dxv[i]));
        let dq = DVector::from_iterator(dim, (0..dim).map(|i| (-f3[i] - q[i] * ds[i]) / s[i]));
        let dp = DVector::from_iterator(dim, (0..dim).map(|i| (-f4[i] - p[i] * dr[i]) / r[i]));

        let mut alpha = 1.0_f64;
        for i in 0..dim {
            for (v, dv) in [(s[i], ds[i]), (r[i], dr[i]), (q[i], dq[i]), (p[i], dp[i])] {
                if dv < 0.0 {
                    alpha = alpha.min(-opts.boundary * v / dv);
                }
            }
        }
        x.axpy(alpha, &dx);
        y += &dy * alpha;
        s += &ds * alpha;
        r += &dr * alpha;
        q += &dq * alpha;
        p += &dp * alpha;
        if iter % 3 != 2 {
            mu /= 10.0;
        }
    }

    let res = prox_residual(sys, w, lambda, &x)?;
    Err(Error::MaxIterReached { iters: opts.max_iter, residual: res })
}

fn penalized_objective(
    sys: &NormalSystem,
    weights: &DVector<f64>,
    lambda: f64,
    x: &BlockVector,
) -> Result<f64> {
    let quad = sys.quadratic(x)?;
    let l1: f64 = x
        .as_dvector()
        .iter()
        .zip(weights.iter())
        .map(|(xi, wi)| wi * xi.abs())
        .sum();
    Ok(quad + lambda * l1)
}

/// Euclidean projection onto `{ v : |W v|_1 <= tau }`. Components with zero
/// weight pass through unchanged; the pivot search is sort-based,
/// `O(m log m)`.
pub fn project_weighted_l1(v: &DVector<f64>, weights: &DVector<f64>, tau: f64) -> DVector<f64> {
    assert_eq!(v.len(), weights.len(), "weight vector length mismatch");
    assert!(tau >= 0.0, "radius must be nonnegative");
    let norm: f64 = v
        .iter()
        .zip(weights.iter())
        .map(|(vi, wi)| wi * vi.abs())
        .sum();
    if norm <= tau {
        return v.clone();
    }
    // breakpoints |v_i| / w_i in decreasing order over the weighted support
    let mut items: Vec<(f64, f64, f64)> = v
        .iter()
        .zip(weights.iter())
        .filter(|(_, &w)| w > 0.0)
        .map(|(&vi, &wi)| (vi.abs() / wi, vi.abs() * wi, wi * wi))
        .collect();
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut acc_wv = 0.0;
    let mut acc_w2 = 0.0;
    let mut theta = 0.0;
    for (k, (t, wv, w2)) in items.iter().enumerate() {
        let _ = t;
        acc_wv += wv;
        acc_w2 += w2;
        let cand = (acc_wv - tau) / acc_w2;
        let next = items.get(k + 1).map(|it| it.0).unwrap_or(0.0);
        if cand >= next {
            theta = cand;
            break;
        }
    }
    DVector::from_iterator(
        v.len(),
        v.iter().zip(weights.iter()).map(|(&vi, &wi)| {
            if wi > 0.0 {
                vi.signum() * (vi.abs() - theta * wi).max(0.0)
            } else {
                vi
            }
        }),
    )
}

/// Spectral projected gradient for the LASSO form
/// `min 1/2 x^T C x - c^T x  s.t.  |W x|_1 <= tau`.
pub fn sparse_smooth_lasso(
    sys: &NormalSystem,
    spec: &SparsePenaltySpec,
    opts: &SparseOptions,
) -> Result<SmootherSolution> {
    let n = sys.matrix.block_dim();
    let len = sys.matrix.len();
    let dim = n * len;
    spec.validate(dim)?;
    let tau = match spec.form {
        SparseForm::Constrained { tau } => tau,
        SparseForm::Penalized { .. } => {
            return Err(Error::InvalidParameter("lasso solver needs the constrained form".into()))
        }
    };
    let w = &spec.weights;
    let tol = opts.tol * (1.0 + sys.rhs.norm());

    let project = |v: &DVector<f64>| project_weighted_l1(v, w, tau);
    let mut x = BlockVector::from_flat(n, project(&BlockVector::zeros(n, len).into_dvector()))?;
    let mut grad = sys.gradient(&x)?;
    let mut fx = sys.quadratic(&x)?;
    let mut history = vec![fx];
    let mut alpha = {
        let pg = project(&(x.as_dvector() - grad.as_dvector())) - x.as_dvector();
        let d = pg.amax();
        if d > 0.0 {
            (1.0 / d).clamp(1e-10, 1e10)
        } else {
            1.0
        }
    };

    let mut iterations = Vec::new();
    for _ in 0..opts.max_iter {
        let pg_norm = (project(&(x.as_dvector() - grad.as_dvector())) - x.as_dvector()).norm();
        iterations.push(IterRecord { objective: fx, residual: pg_norm, step: alpha });
        if pg_norm <= tol {
            return Ok(SmootherSolution {
                x,
                objective: fx,
                residual_norm: pg_norm,
                iterations,
                status: SolveStatus::Converged,
            });
        }

        // direction toward the projected BB trial point
        let trial = project(&(x.as_dvector() - grad.as_dvector() * alpha));
        let d = BlockVector::from_flat(n, trial - x.as_dvector())?;
        let slope = grad.dot(&d);
        if slope >= 0.0 {
            // projection says no descent left at this scale
            return Ok(SmootherSolution {
                x,
                objective: fx,
                residual_norm: pg_norm,
                iterations,
                status: SolveStatus::Converged,
            });
        }
        let f_ref = history.iter().cloned().fold(f64::MIN, f64::max);
        let mut beta = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand = x.clone();
            cand.axpy(beta, &d);
            let fc = sys.quadratic(&cand)?;
            if fc <= f_ref + 1e-4 * beta * slope {
                accepted = Some((cand, fc));
                break;
            }
            beta *= 0.5;
        }
        let (x_new, f_new) =
            accepted.ok_or(Error::LineSearchFailed { backtracks: 60 })?;

        let grad_new = sys.gradient(&x_new)?;
        // BB step from the accepted displacement
        let sdiff = x_new.as_dvector() - x.as_dvector();
        let ydiff = grad_new.as_dvector() - grad.as_dvector();
        let sty = sdiff.dot(&ydiff);
        alpha = if sty > 1e-30 {
            (sdiff.dot(&sdiff) / sty).clamp(1e-10, 1e10)
        } else {
            (alpha * 10.0).clamp(1e-10, 1e10)
        };

        x = x_new;
        grad = grad_new;
        fx = f_new;
        history.push(fx);
        if history.len() > opts.window {
            history.remove(0);
        }
    }

    let pg_norm = (project(&(x.as_dvector() - grad.as_dvector())) - x.as_dvector()).norm();
    Err(Error::MaxIterReached { iters: opts.max_iter, residual: pg_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocktri::BlockTriMatrix;
    use crate::linear::assemble;
    use crate::model::smooth_signal_model;

    fn identity_system(dim: usize, c: &[f64]) -> NormalSystem {
        NormalSystem {
            matrix: BlockTriMatrix::identity(1, dim),
            rhs: BlockVector::from_flat(1, DVector::from_row_slice(c)).unwrap(),
            offset: 0.0,
        }
    }

    fn smoother_system() -> NormalSystem {
        let mut model = smooth_signal_model(6, 0.3, 1.0, 0.4).unwrap();
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (0.6 * i as f64).sin() + 0.2);
        }
        assemble(&model).unwrap()
    }

    #[test]
    fn projection_leaves_feasible_points() {
        let v = DVector::from_column_slice(&[0.5, -0.5]);
        let w = DVector::from_element(2, 1.0);
        let p = project_weighted_l1(&v, &w, 2.0);
        assert_eq!(p, v);
    }

    #[test]
    fn projection_two_dim_hand_case() {
        // project (3, 1) onto the unit-weight l1 ball of radius 2 -> (2, 0)
        let v = DVector::from_column_slice(&[3.0, 1.0]);
        let w = DVector::from_element(2, 1.0);
        let p = project_weighted_l1(&v, &w, 2.0);
        assert!((p - DVector::from_column_slice(&[2.0, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn projection_idempotent_and_zero_weight_passthrough() {
        let v = DVector::from_column_slice(&[4.0, -3.0, 7.0]);
        let w = DVector::from_column_slice(&[1.0, 2.0, 0.0]);
        let p1 = project_weighted_l1(&v, &w, 1.5);
        let p2 = project_weighted_l1(&p1, &w, 1.5);
        assert!((&p1 - &p2).amax() < 1e-12, "projection is not idempotent");
        assert_eq!(p1[2], 7.0, "zero-weight component must pass through");
        let norm: f64 = p1.iter().zip(w.iter()).map(|(v, w)| w * v.abs()).sum();
        assert!(norm <= 1.5 + 1e-12);
    }

    #[test]
    fn projection_tau_zero_zeroes_weighted_components() {
        let v = DVector::from_column_slice(&[4.0, -3.0, 7.0]);
        let w = DVector::from_column_slice(&[1.0, 2.0, 0.0]);
        let p = project_weighted_l1(&v, &w, 0.0);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 7.0);
    }

    #[test]
    fn penalized_full_shrinkage_at_large_lambda() {
        let sys = identity_system(4, &[0.5, -0.8, 0.3, 0.9]);
        let lambda = 1.0; // >= |c|_inf = 0.9
        let spec = SparsePenaltySpec {
            weights: DVector::from_element(4, 1.0),
            form: SparseForm::Penalized { lambda },
        };
        let sol = sparse_smooth_penalized(&sys, &spec, &SparseOptions::default()).unwrap();
        assert!(sol.x.as_dvector().amax() < 1e-6, "expected full shrinkage to zero");
    }

    #[test]
    fn penalized_matches_soft_threshold_oracle_on_identity() {
        let c = [1.5, -0.3, 0.05, -2.0, 0.7];
        let sys = identity_system(5, &c);
        let lambda = 0.4;
        let spec = SparsePenaltySpec {
            weights: DVector::from_element(5, 1.0),
            form: SparseForm::Penalized { lambda },
        };
        let opts = SparseOptions { tol: 1e-9, ..Default::default() };
        let sol = sparse_smooth_penalized(&sys, &spec, &opts).unwrap();
        for i in 0..5 {
            let want = soft(c[i], lambda);
            assert!(
                (sol.x.as_dvector()[i] - want).abs() < 1e-8,
                "component {i}: got {}, soft-threshold oracle {want}",
                sol.x.as_dvector()[i]
            );
        }
    }

    #[test]
    fn penalized_vanishing_lambda_recovers_unconstrained() {
        let sys = smoother_system();
        let spec = SparsePenaltySpec {
            weights: DVector::from_element(12, 1.0),
            form: SparseForm::Penalized { lambda: 1e-10 },
        };
        let sol = sparse_smooth_penalized(&sys, &spec, &SparseOptions::default()).unwrap();
        let (free, _) = sys.matrix.solve(&sys.rhs).unwrap();
        assert!((sol.x.as_dvector() - free.as_dvector()).amax() < 1e-6);
    }

    #[test]
    fn phi_psi_diagonal_identity() {
        // (Phi^2 - Psi^2)_ii algebraically equals 4 q p / (s r); the Newton
        // matrix is built from the left-hand side, this pins the identity
        let (q, s, p, r) = (0.7, 1.3, 0.4, 2.1);
        let phi: f64 = q / s + p / r;
        let psi: f64 = q / s - p / r;
        assert!((phi * phi - psi * psi - 4.0 * q * p / (s * r)).abs() < 1e-15);
    }

    #[test]
    fn lasso_inactive_budget_recovers_unconstrained() {
        let sys = smoother_system();
        let (free, _) = sys.matrix.solve(&sys.rhs).unwrap();
        let w = DVector::from_element(12, 1.0);
        let budget: f64 = free.as_dvector().iter().map(|v| v.abs()).sum::<f64>() + 1.0;
        let spec = SparsePenaltySpec {
            weights: w,
            form: SparseForm::Constrained { tau: budget },
        };
        let sol = sparse_smooth_lasso(&sys, &spec, &SparseOptions::default()).unwrap();
        assert!((sol.x.as_dvector() - free.as_dvector()).amax() < 1e-4);
    }

    #[test]
    fn lasso_zero_budget_pins_weighted_components() {
        let sys = smoother_system();
        // exempt the derivative components (even indices), pin the values
        let mut w = DVector::zeros(12);
        for i in 0..6 {
            w[2 * i + 1] = 1.0;
        }
        let spec = SparsePenaltySpec { weights: w.clone(), form: SparseForm::Constrained { tau: 0.0 } };
        let sol = sparse_smooth_lasso(&sys, &spec, &SparseOptions::default()).unwrap();
        for i in 0..6 {
            assert!(sol.x.as_dvector()[2 * i + 1].abs() < 1e-10);
        }
        // exempt components solve the reduced problem: gradient in the free
        // coordinates vanishes
        let grad = sys.gradient(&sol.x).unwrap();
        for i in 0..6 {
            assert!(
                grad.as_dvector()[2 * i].abs() < 1e-4,
                "free coordinate {i} has gradient {}",
                grad.as_dvector()[2 * i]
            );
        }
    }

    #[test]
    fn lasso_descent_is_safeguarded() {
        let sys = smoother_system();
        let spec = SparsePenaltySpec {
            weights: DVector::from_element(12, 1.0),
            form: SparseForm::Constrained { tau: 0.8 },
        };
        let sol = sparse_smooth_lasso(&sys, &spec, &SparseOptions::default()).unwrap();
        // nonmonotone window allows transient increases but the run must end
        // at or below its starting objective
        let first = sol.iterations.first().unwrap().objective;
        assert!(sol.objective <= first + 1e-12);
        // feasibility
        let norm: f64 = sol.x.as_dvector().iter().map(|v| v.abs()).sum();
        assert!(norm <= 0.8 + 1e-8);
    }
}
