//! Piecewise linear-quadratic (PLQ) penalties and the general PLQ smoother.
//!
//! A penalty is the support-function-like object
//!
//! ```text
//! rho(y) = sup_{u in U} { <u, b + By> - 1/2 <u, M u> },   U = { u : A^T u <= a }
//! ```
//!
//! with `M` symmetric positive semidefinite and `B` injective. The catalog
//! covers the quadratic, absolute-value, Huber and Vapnik losses; arbitrary
//! quadruples are accepted through [`PlqPenalty::general`].
//!
//! [`smooth_plq`] minimizes a sum of such penalties of the whitened process
//! and measurement residuals by an interior-point method on the saddle-point
//! first-order system. Slack/multiplier pairs `(s, q)` attach to each
//! polyhedral constraint; eliminating `(s, q)` and then the dual variables
//! `u` reduces every Newton step to a block-tridiagonal solve in the state,
//! with per-step dense work bounded by the (small) dual dimensions.

use nalgebra::{DMatrix, DVector};

use crate::blocktri::{BlockTriMatrix, BlockVector};
use crate::constrained::{solve_qp_constrained, IpOptions};
use crate::linear::{CovCache, IterRecord, NormalSystem, SmootherSolution, SolveStatus};
use crate::model::LinearStateSpace;
use crate::{Error, Result};

/// Which closed-form evaluator (if any) applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyKind {
    L2,
    L1,
    Huber(f64),
    Vapnik(f64),
    General,
}

/// An extended piecewise linear-quadratic penalty `rho_{U,M,b,B}`.
#[derive(Debug, Clone)]
pub struct PlqPenalty {
    kind: PenaltyKind,
    /// Constraint matrix of `U = { u : a_mat^T u <= a_vec }`, `du x ra`.
    a_mat: DMatrix<f64>,
    a_vec: DVector<f64>,
    m_mat: DMatrix<f64>,
    b_vec: DVector<f64>,
    b_mat: DMatrix<f64>,
    /// A strictly feasible point of `U`; seeds the interior-point methods.
    interior: DVector<f64>,
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

impl PlqPenalty {
    /// Quadratic: `rho(y) = y^2 / 2`.
    pub fn l2() -> Self {
        PlqPenalty {
            kind: PenaltyKind::L2,
            a_mat: DMatrix::zeros(1, 0),
            a_vec: DVector::zeros(0),
            m_mat: scalar(1.0),
            b_vec: DVector::zeros(1),
            b_mat: scalar(1.0),
            interior: DVector::zeros(1),
        }
    }

    /// Absolute value: `rho(y) = |y|`.
    pub fn l1() -> Self {
        PlqPenalty {
            kind: PenaltyKind::L1,
            a_mat: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            a_vec: DVector::from_column_slice(&[1.0, 1.0]),
            m_mat: scalar(0.0),
            b_vec: DVector::zeros(1),
            b_mat: scalar(1.0),
            interior: DVector::zeros(1),
        }
    }

    /// Laplace-matched absolute value: `rho(y) = sqrt(2) |y|`. This is the
    /// negative log of the unit-variance Laplace density, so using it as a
    /// measurement penalty reproduces the robust smoother exactly.
    pub fn l1_laplace() -> Self {
        PlqPenalty {
            kind: PenaltyKind::L1,
            b_mat: scalar(std::f64::consts::SQRT_2),
            ..Self::l1()
        }
    }

    /// Huber with threshold `k > 0`.
    pub fn huber(k: f64) -> Result<Self> {
        if k <= 0.0 {
            return Err(Error::InvalidParameter(format!("huber threshold {k} must be > 0")));
        }
        Ok(PlqPenalty {
            kind: PenaltyKind::Huber(k),
            a_mat: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            a_vec: DVector::from_column_slice(&[k, k]),
            m_mat: scalar(1.0),
            b_vec: DVector::zeros(1),
            b_mat: scalar(1.0),
            interior: DVector::zeros(1),
        })
    }

    /// Vapnik epsilon-insensitive loss, `rho(y) = max(|y| - eps, 0)`.
    pub fn vapnik(eps: f64) -> Result<Self> {
        if eps < 0.0 {
            return Err(Error::InvalidParameter(format!("vapnik band {eps} must be >= 0")));
        }
        Ok(PlqPenalty {
            kind: PenaltyKind::Vapnik(eps),
            // u in [0,1]^2
            a_mat: DMatrix::from_row_slice(2, 4, &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0]),
            a_vec: DVector::from_column_slice(&[1.0, 0.0, 1.0, 0.0]),
            m_mat: DMatrix::zeros(2, 2),
            b_vec: DVector::from_column_slice(&[-eps, -eps]),
            b_mat: DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            interior: DVector::from_column_slice(&[0.5, 0.5]),
        })
    }

    /// Arbitrary quadruple. `interior` must satisfy `a_mat^T u < a_vec`
    /// strictly; it seeds the smoother's interior-point iteration.
    pub fn general(
        a_mat: DMatrix<f64>,
        a_vec: DVector<f64>,
        m_mat: DMatrix<f64>,
        b_vec: DVector<f64>,
        b_mat: DMatrix<f64>,
        interior: DVector<f64>,
    ) -> Result<Self> {
        let du = b_mat.nrows();
        if a_mat.nrows() != du
            || a_mat.ncols() != a_vec.len()
            || m_mat.nrows() != du
            || m_mat.ncols() != du
            || b_vec.len() != du
            || interior.len() != du
        {
            return Err(Error::ShapeMismatch("penalty quadruple dimensions disagree".into()));
        }
        let slack = &a_vec - a_mat.transpose() * &interior;
        if slack.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidParameter(
                "interior point is not strictly feasible for U".into(),
            ));
        }
        Ok(PlqPenalty {
            kind: PenaltyKind::General,
            a_mat,
            a_vec,
            m_mat,
            b_vec,
            b_mat,
            interior,
        })
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    /// Dimension of the argument `y`.
    pub fn y_dim(&self) -> usize {
        self.b_mat.ncols()
    }

    /// Dimension of the dual variable `u`.
    pub fn dual_dim(&self) -> usize {
        self.b_mat.nrows()
    }

    /// Number of linear inequalities describing `U`.
    pub fn constraint_count(&self) -> usize {
        self.a_vec.len()
    }

    /// Componentwise extension to `dim`-dimensional arguments. Penalties that
    /// already match `dim` pass through unchanged (cross-component coupling).
    pub fn tile(&self, dim: usize) -> Result<PlqPenalty> {
        if self.y_dim() == dim {
            return Ok(self.clone());
        }
        if self.y_dim() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "cannot tile a {}-dimensional penalty to dimension {}",
                self.y_dim(),
                dim
            )));
        }
        let du = self.dual_dim();
        let ra = self.constraint_count();
        let mut a_mat = DMatrix::zeros(du * dim, ra * dim);
        let mut m_mat = DMatrix::zeros(du * dim, du * dim);
        let mut b_mat = DMatrix::zeros(du * dim, dim);
        let mut a_vec = DVector::zeros(ra * dim);
        let mut b_vec = DVector::zeros(du * dim);
        let mut interior = DVector::zeros(du * dim);
        for i in 0..dim {
            a_mat.view_mut((i * du, i * ra), (du, ra)).copy_from(&self.a_mat);
            m_mat.view_mut((i * du, i * du), (du, du)).copy_from(&self.m_mat);
            b_mat.view_mut((i * du, i), (du, 1)).copy_from(&self.b_mat);
            a_vec.rows_mut(i * ra, ra).copy_from(&self.a_vec);
            b_vec.rows_mut(i * du, du).copy_from(&self.b_vec);
            interior.rows_mut(i * du, du).copy_from(&self.interior);
        }
        Ok(PlqPenalty { kind: self.kind, a_mat, a_vec, m_mat, b_vec, b_mat, interior })
    }

    /// Penalty value. Catalog entries use their closed forms; general
    /// quadruples fall back to the sup computation.
    pub fn eval(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.y_dim() {
            return Err(Error::ShapeMismatch(format!(
                "argument has length {}, penalty expects {}",
                y.len(),
                self.y_dim()
            )));
        }
        let t = &self.b_vec + &self.b_mat * y;
        match self.kind {
            PenaltyKind::L2 => Ok(0.5 * t.norm_squared()),
            PenaltyKind::L1 => Ok(t.abs().sum()),
            PenaltyKind::Huber(k) => Ok(t
                .iter()
                .map(|&v| if v.abs() <= k { 0.5 * v * v } else { k * v.abs() - 0.5 * k * k })
                .sum()),
            PenaltyKind::Vapnik(_) => Ok(t.iter().map(|&v| v.max(0.0)).sum()),
            PenaltyKind::General => self.eval_sup(y),
        }
    }

    /// Penalty value through the sup definition: a small concave QP over `U`.
    /// This is the independent route used to cross-check the closed forms.
    pub fn eval_sup(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.y_dim() {
            return Err(Error::ShapeMismatch("argument length".into()));
        }
        let eta = &self.b_vec + &self.b_mat * y;
        let du = self.dual_dim();
        if self.constraint_count() == 0 {
            // unconstrained concave quadratic: M u = eta
            return match self.m_mat.clone().cholesky() {
                Some(ch) => {
                    let u = ch.solve(&eta);
                    Ok(eta.dot(&u) - 0.5 * u.dot(&(&self.m_mat * &u)))
                }
                None => Err(self.unbounded_certificate(&eta)),
            };
        }
        if let Some(err) = self.null_ray_check(&eta) {
            return Err(err);
        }
        // min 1/2 u^T M u - eta^T u  s.t.  A^T u <= a
        let sys = NormalSystem {
            matrix: BlockTriMatrix::new(vec![self.m_mat.clone()], vec![])?,
            rhs: BlockVector::from_flat(du, eta.clone())?,
            offset: 0.0,
        };
        let cons = crate::model::AffineConstraints {
            blocks: vec![self.a_mat.transpose()],
            bounds: vec![self.a_vec.clone()],
        };
        let (sol, _) = solve_qp_constrained(&sys, &cons, &IpOptions::default())?;
        let u = sol.x.into_dvector();
        Ok(eta.dot(&u) - 0.5 * u.dot(&(&self.m_mat * &u)))
    }

    fn unbounded_certificate(&self, eta: &DVector<f64>) -> Error {
        Error::Unbounded(format!(
            "M is singular and the argument has a null-space component; ray u(t) = t * v with \
             M v = 0, <eta, v> = {:.3e} grows without bound",
            eta.norm()
        ))
    }

    /// Detect an improving ray `v` with `M v = 0`, `A^T v <= 0`,
    /// `<eta, v> > 0`; such a ray certifies `sup = +inf`.
    fn null_ray_check(&self, eta: &DVector<f64>) -> Option<Error> {
        let eig = self.m_mat.clone().symmetric_eigen();
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam.abs() > 1e-10 {
                continue;
            }
            let v = eig.eigenvectors.column(i).into_owned();
            for dir in [1.0, -1.0] {
                let ray = &v * dir;
                let along = eta.dot(&ray);
                let recession_ok = self
                    .a_mat
                    .transpose()
                    .column_iter()
                    .count()
                    .eq(&0usize)
                    || (self.a_mat.transpose() * &ray).iter().all(|&c| c <= 1e-10);
                if along > 1e-10 && recession_ok {
                    return Some(Error::Unbounded(format!(
                        "improving ray with <eta, v> = {along:.3e} inside the recession cone"
                    )));
                }
            }
        }
        None
    }
}

/// Coercivity check for catalog entries: the quadratic has full-rank `M`; the
/// other three have bounded `U`, so the recession cone is trivial. General
/// quadruples are out of scope for this test.
pub fn check_coercivity_catalog(pen: &PlqPenalty) -> Result<bool> {
    match pen.kind {
        PenaltyKind::L2 => Ok(pen.m_mat.clone().cholesky().is_some()),
        PenaltyKind::L1 | PenaltyKind::Huber(_) | PenaltyKind::Vapnik(_) => Ok(true),
        PenaltyKind::General => Err(Error::NotInCatalog),
    }
}

#[derive(Debug, Clone)]
pub struct PlqOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub boundary: f64,
}

impl Default for PlqOptions {
    fn default() -> Self {
        PlqOptions { max_iter: 80, tol: 1e-6, boundary: 0.995 }
    }
}

/// Interior-point block for one penalty term: the tiled quadruple plus its
/// dual `u` and slack/multiplier pair `(s, q)`.
struct PenBlock {
    pen: PlqPenalty,
    u: DVector<f64>,
    q: DVector<f64>,
    s: DVector<f64>,
}

impl PenBlock {
    fn new(pen: PlqPenalty) -> PenBlock {
        let u = pen.interior.clone();
        let s = &pen.a_vec - pen.a_mat.transpose() * &u;
        let q = DVector::from_element(pen.constraint_count(), 1.0);
        PenBlock { pen, u, q, s }
    }

    /// `Omega = M + A diag(q/s) A^T`.
    fn omega(&self) -> DMatrix<f64> {
        let ra = self.pen.constraint_count();
        let mut omega = self.pen.m_mat.clone();
        if ra > 0 {
            let mut scaled = self.pen.a_mat.clone();
            for j in 0..ra {
                let w = self.q[j] / self.s[j];
                for i in 0..scaled.nrows() {
                    scaled[(i, j)] *= w;
                }
            }
            omega += scaled * self.pen.a_mat.transpose();
        }
        omega
    }

    fn residuals(&self, eta: &DVector<f64>, mu: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let r1 = self.pen.a_mat.transpose() * &self.u + &self.s - &self.pen.a_vec;
        let r2 = DVector::from_iterator(
            self.q.len(),
            self.q.iter().zip(self.s.iter()).map(|(q, s)| q * s - mu),
        );
        let r3 = eta - &self.pen.m_mat * &self.u - &self.pen.a_mat * &self.q;
        (r1, r2, r3)
    }

    /// `g = r3 - A (q o r1 - r2) / s`.
    fn elimination_rhs(&self, eta: &DVector<f64>, mu: f64) -> DVector<f64> {
        let (r1, r2, r3) = self.residuals(eta, mu);
        if self.pen.constraint_count() == 0 {
            return r3;
        }
        let w = DVector::from_iterator(
            r1.len(),
            (0..r1.len()).map(|j| (self.q[j] * r1[j] - r2[j]) / self.s[j]),
        );
        r3 - &self.pen.a_mat * w
    }

    /// Back-substitute `(du, dq, ds)` given the state step's contribution
    /// `j_dx = J dx` and apply the damped update later.
    fn newton_increments(
        &self,
        eta: &DVector<f64>,
        mu: f64,
        omega_inv_applied: impl Fn(&DVector<f64>) -> DVector<f64>,
        j_dx: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let g = self.elimination_rhs(eta, mu);
        let du = omega_inv_applied(&(j_dx + g));
        let (r1, r2, _) = self.residuals(eta, mu);
        let ds = -&r1 - self.pen.a_mat.transpose() * &du;
        let dq = DVector::from_iterator(
            self.q.len(),
            (0..self.q.len()).map(|j| (-r2[j] - self.q[j] * ds[j]) / self.s[j]),
        );
        (du, dq, ds)
    }
}

/// PLQ smoothing problem context: whitened residual maps per step.
struct PlqWork<'a> {
    model: &'a LinearStateSpace,
    cov: CovCache,
    /// Inverse lower Cholesky factors of `Q_k` (dense, small).
    lq_inv: Vec<DMatrix<f64>>,
    /// Inverse lower Cholesky factors of `R_k`; `None` when `m(k) = 0`.
    lr_inv: Vec<Option<DMatrix<f64>>>,
}

impl<'a> PlqWork<'a> {
    fn new(model: &'a LinearStateSpace) -> Result<Self> {
        model.validate()?;
        let cov = CovCache::from_linear(model)?;
        let n = model.state_dim();
        let lq_inv = cov
            .q
            .iter()
            .map(|ch| {
                ch.l()
                    .solve_lower_triangular(&DMatrix::identity(n, n))
                    .expect("cholesky factor invertible")
            })
            .collect();
        let lr_inv = model
            .steps
            .iter()
            .zip(cov.r.iter())
            .map(|(s, ch)| {
                ch.as_ref().map(|ch| {
                    let m = s.meas.nrows();
                    ch.l()
                        .solve_lower_triangular(&DMatrix::identity(m, m))
                        .expect("cholesky factor invertible")
                })
            })
            .collect();
        Ok(PlqWork { model, cov, lq_inv, lr_inv })
    }

    /// Whitened process residual `Q_k^{-1/2} ((Gx)_k - w_k)`.
    fn proc_residual(&self, x: &BlockVector, k: usize) -> DVector<f64> {
        let raw = if k == 0 {
            x.block_owned(0) - &self.model.init_mean
        } else {
            x.block_owned(k) - &self.model.steps[k].trans * x.block(k - 1)
        };
        &self.lq_inv[k] * raw
    }

    /// Whitened measurement residual `R_k^{-1/2} (H_k x_k - z_k)`.
    fn meas_residual(&self, x: &BlockVector, k: usize) -> Option<DVector<f64>> {
        self.lr_inv[k].as_ref().map(|lr| {
            let raw = &self.model.steps[k].meas * x.block(k) - &self.model.steps[k].meas_val;
            lr * raw
        })
    }
}

/// Full PLQ objective
/// `sum_k rho_w(Q_k^{-1/2}((Gx)_k - w_k)) + rho_v(R_k^{-1/2}(H_k x_k - z_k))`.
pub fn plq_objective(
    model: &LinearStateSpace,
    w_pen: &PlqPenalty,
    v_pen: &PlqPenalty,
    x: &BlockVector,
) -> Result<f64> {
    let work = PlqWork::new(model)?;
    let n = model.state_dim();
    let wp = w_pen.tile(n)?;
    let mut total = 0.0;
    for k in 0..model.horizon() {
        total += wp.eval(&work.proc_residual(x, k))?;
        if let Some(res) = work.meas_residual(x, k) {
            let vp = v_pen.tile(res.len())?;
            total += vp.eval(&res)?;
        }
    }
    Ok(total)
}

/// Smooth a linear model under PLQ process/measurement penalties applied to
/// the whitened residuals. Scalar penalties are applied componentwise; a
/// penalty whose argument dimension already matches the residual is used as
/// a coupled block.
pub fn smooth_plq(
    model: &LinearStateSpace,
    w_pen: &PlqPenalty,
    v_pen: &PlqPenalty,
    opts: &PlqOptions,
) -> Result<SmootherSolution> {
    let work = PlqWork::new(model)?;
    let n = model.state_dim();
    let len = model.horizon();

    let mut proc_blocks: Vec<PenBlock> = Vec::with_capacity(len);
    let mut meas_blocks: Vec<Option<PenBlock>> = Vec::with_capacity(len);
    for k in 0..len {
        proc_blocks.push(PenBlock::new(w_pen.tile(n)?));
        let m = model.steps[k].meas.nrows();
        meas_blocks.push(if m > 0 { Some(PenBlock::new(v_pen.tile(m)?)) } else { None });
    }

    // start from the Gaussian solution; any trajectory would do
    let mut x = crate::linear::smooth(model)?.x;

    let total_cons: usize = proc_blocks.iter().map(|b| b.pen.constraint_count()).sum::<usize>()
        + meas_blocks
            .iter()
            .flatten()
            .map(|b| b.pen.constraint_count())
            .sum::<usize>();
    let mut mu = if total_cons == 0 {
        0.0
    } else {
        let mut acc = 0.0;
        for b in proc_blocks.iter().chain(meas_blocks.iter().flatten()) {
            acc += b.q.dot(&b.s);
        }
        acc / total_cons as f64
    };

    let mut iterations = Vec::new();
    for iter in 0..opts.max_iter {
        // per-block eta and residuals at mu = 0 for the stopping test
        let eta_proc: Vec<DVector<f64>> = (0..len)
            .map(|k| &proc_blocks[k].pen.b_vec + &proc_blocks[k].pen.b_mat * work.proc_residual(&x, k))
            .collect();
        let eta_meas: Vec<Option<DVector<f64>>> = (0..len)
            .map(|k| {
                work.meas_residual(&x, k).map(|res| {
                    let b = meas_blocks[k].as_ref().unwrap();
                    &b.pen.b_vec + &b.pen.b_mat * res
                })
            })
            .collect();

        // stationarity in x: r4_j = Jw_j^T u_j - G_{j+1}^T Jw_{j+1}^T u_{j+1} + Jv_j^T u_j
        let phi: Vec<DVector<f64>> = (0..len)
            .map(|k| {
                work.lq_inv[k].transpose()
                    * (proc_blocks[k].pen.b_mat.transpose() * &proc_blocks[k].u)
            })
            .collect();
        let mut r4 = BlockVector::zeros(n, len);
        for j in 0..len {
            let mut v = phi[j].clone();
            if j + 1 < len {
                v -= self_trans(model, j + 1).transpose() * &phi[j + 1];
            }
            if let Some(b) = meas_blocks[j].as_ref() {
                let lr = work.lr_inv[j].as_ref().unwrap();
                v += self_meas(model, j).transpose()
                    * (lr.transpose() * (b.pen.b_mat.transpose() * &b.u));
            }
            r4.set_block(j, &v);
        }

        let mut kkt = r4.as_dvector().amax();
        for (k, b) in proc_blocks.iter().enumerate() {
            let (r1, r2, r3) = b.residuals(&eta_proc[k], 0.0);
            kkt = kkt.max(r1.amax()).max(r2.amax()).max(r3.amax());
        }
        for (k, b) in meas_blocks.iter().enumerate() {
            if let Some(b) = b {
                let (r1, r2, r3) = b.residuals(eta_meas[k].as_ref().unwrap(), 0.0);
                kkt = kkt.max(r1.amax()).max(r2.amax()).max(r3.amax());
            }
        }
        iterations.push(IterRecord {
            objective: plq_objective_from_work(&work, &proc_blocks, &meas_blocks, &x)?,
            residual: kkt,
            step: mu,
        });
        if kkt <= opts.tol {
            let objective = iterations.last().unwrap().objective;
            return Ok(SmootherSolution {
                x,
                objective,
                residual_norm: kkt,
                iterations,
                status: SolveStatus::Converged,
            });
        }

        // Newton matrix: block-tridiagonal with Q^-1 replaced by
        // Lq^-T (B^T Omega^-1 B) Lq^-1 and likewise for measurements.
        let omega_proc: Vec<DMatrix<f64>> = proc_blocks.iter().map(|b| b.omega()).collect();
        let omega_meas: Vec<Option<DMatrix<f64>>> =
            meas_blocks.iter().map(|b| b.as_ref().map(|b| b.omega())).collect();
        let pw: Vec<DMatrix<f64>> = (0..len)
            .map(|k| {
                let oinv_b = solve_sym(&omega_proc[k], &proc_blocks[k].pen.b_mat);
                let d = proc_blocks[k].pen.b_mat.transpose() * oinv_b;
                work.lq_inv[k].transpose() * d * &work.lq_inv[k]
            })
            .collect();
        let pv: Vec<Option<DMatrix<f64>>> = (0..len)
            .map(|k| {
                meas_blocks[k].as_ref().map(|b| {
                    let lr = work.lr_inv[k].as_ref().unwrap();
                    let oinv_b = solve_sym(omega_meas[k].as_ref().unwrap(), &b.pen.b_mat);
                    let d = b.pen.b_mat.transpose() * oinv_b;
                    lr.transpose() * d * lr
                })
            })
            .collect();

        let mut diag = Vec::with_capacity(len);
        let mut sub = Vec::with_capacity(len.saturating_sub(1));
        for k in 0..len {
            let mut ck = pw[k].clone();
            if k + 1 < len {
                let g_next = self_trans(model, k + 1);
                ck += g_next.transpose() * &pw[k + 1] * g_next;
                sub.push(-(&pw[k + 1] * g_next));
            }
            if let Some(pvk) = pv[k].as_ref() {
                let h = self_meas(model, k);
                ck += h.transpose() * pvk * h;
            }
            diag.push(ck);
        }
        let newton = BlockTriMatrix::new(diag, sub)?;

        // rhs = -r4 - sum J^T Omega^-1 g
        let gamma_proc: Vec<DVector<f64>> = (0..len)
            .map(|k| {
                let g = proc_blocks[k].elimination_rhs(&eta_proc[k], mu);
                work.lq_inv[k].transpose()
                    * (proc_blocks[k].pen.b_mat.transpose() * solve_sym_vec(&omega_proc[k], &g))
            })
            .collect();
        let mut rhs = BlockVector::zeros(n, len);
        for j in 0..len {
            let mut v = -r4.block_owned(j) - &gamma_proc[j];
            if j + 1 < len {
                v += self_trans(model, j + 1).transpose() * &gamma_proc[j + 1];
            }
            if let Some(b) = meas_blocks[j].as_ref() {
                let lr = work.lr_inv[j].as_ref().unwrap();
                let g = b.elimination_rhs(eta_meas[j].as_ref().unwrap(), mu);
                v -= self_meas(model, j).transpose()
                    * (lr.transpose()
                        * (b.pen.b_mat.transpose()
                            * solve_sym_vec(omega_meas[j].as_ref().unwrap(), &g)));
            }
            rhs.set_block(j, &v);
        }

        let (dx, _) = newton.solve(&rhs)?;

        // back-substitute per block and find the damped step length
        let mut alpha = 1.0_f64;
        let mut upd_proc = Vec::with_capacity(len);
        let mut upd_meas: Vec<Option<(DVector<f64>, DVector<f64>, DVector<f64>)>> =
            Vec::with_capacity(len);
        for k in 0..len {
            let jdx_raw = if k == 0 {
                dx.block_owned(0)
            } else {
                dx.block_owned(k) - self_trans(model, k) * dx.block(k - 1)
            };
            let jdx = &proc_blocks[k].pen.b_mat * (&work.lq_inv[k] * jdx_raw);
            let om = &omega_proc[k];
            let inc = proc_blocks[k].newton_increments(
                &eta_proc[k],
                mu,
                |v| solve_sym_vec(om, v),
                &jdx,
            );
            alpha = alpha
                .min(frac_boundary(&proc_blocks[k].s, &inc.2, opts.boundary))
                .min(frac_boundary(&proc_blocks[k].q, &inc.1, opts.boundary));
            upd_proc.push(inc);

            if let Some(b) = meas_blocks[k].as_ref() {
                let lr = work.lr_inv[k].as_ref().unwrap();
                let jdx = &b.pen.b_mat * (lr * (self_meas(model, k) * dx.block(k)));
                let om = omega_meas[k].as_ref().unwrap();
                let inc =
                    b.newton_increments(eta_meas[k].as_ref().unwrap(), mu, |v| solve_sym_vec(om, v), &jdx);
                alpha = alpha
                    .min(frac_boundary(&b.s, &inc.2, opts.boundary))
                    .min(frac_boundary(&b.q, &inc.1, opts.boundary));
                upd_meas.push(Some(inc));
            } else {
                upd_meas.push(None);
            }
        }

        x.axpy(alpha, &dx);
        for (k, (du, dq, ds)) in upd_proc.iter().enumerate() {
            proc_blocks[k].u += du * alpha;
            proc_blocks[k].q += dq * alpha;
            proc_blocks[k].s += ds * alpha;
        }
        for (k, upd) in upd_meas.iter().enumerate() {
            if let Some((du, dq, ds)) = upd {
                let b = meas_blocks[k].as_mut().unwrap();
                b.u += du * alpha;
                b.q += dq * alpha;
                b.s += ds * alpha;
            }
        }
        if total_cons > 0 && iter % 3 != 2 {
            mu /= 10.0;
        }
    }

    let last = iterations.last().map(|r| r.residual).unwrap_or(f64::NAN);
    Err(Error::MaxIterReached { iters: opts.max_iter, residual: last })
}

fn plq_objective_from_work(
    work: &PlqWork<'_>,
    proc_blocks: &[PenBlock],
    meas_blocks: &[Option<PenBlock>],
    x: &BlockVector,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..proc_blocks.len() {
        total += proc_blocks[k].pen.eval(&work.proc_residual(x, k))?;
        if let Some(b) = meas_blocks[k].as_ref() {
            total += b.pen.eval(&work.meas_residual(x, k).unwrap())?;
        }
    }
    Ok(total)
}

fn self_trans(model: &LinearStateSpace, k: usize) -> &DMatrix<f64> {
    &model.steps[k].trans
}

fn self_meas(model: &LinearStateSpace, k: usize) -> &DMatrix<f64> {
    &model.steps[k].meas
}

fn frac_boundary(v: &DVector<f64>, dv: &DVector<f64>, damping: f64) -> f64 {
    let mut alpha = 1.0_f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-damping * v[i] / dv[i]);
        }
    }
    alpha
}

/// Solve `S x = b` for symmetric positive definite `S` (falls back to LU for
/// semidefinite corner cases perturbed by roundoff).
fn solve_sym(s: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match s.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => s.clone().lu().solve(b).expect("omega block is nonsingular"),
    }
}

fn solve_sym_vec(s: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    match s.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => s.clone().lu().solve(b).expect("omega block is nonsingular"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::smooth_signal_model;

    #[test]
    fn catalog_closed_forms() {
        let y = |v: f64| DVector::from_element(1, v);
        assert!((PlqPenalty::l2().eval(&y(3.0)).unwrap() - 4.5).abs() < 1e-15);
        assert!((PlqPenalty::l1().eval(&y(-2.5)).unwrap() - 2.5).abs() < 1e-15);
        let huber = PlqPenalty::huber(1.0).unwrap();
        assert!((huber.eval(&y(2.0)).unwrap() - 1.5).abs() < 1e-15);
        assert!((huber.eval(&y(0.5)).unwrap() - 0.125).abs() < 1e-15);
        let vapnik = PlqPenalty::vapnik(0.5).unwrap();
        assert!((vapnik.eval(&y(0.3)).unwrap()).abs() < 1e-15);
        assert!((vapnik.eval(&y(1.0)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn vapnik_zero_band_is_l1() {
        let vap = PlqPenalty::vapnik(0.0).unwrap();
        let l1 = PlqPenalty::l1();
        for i in -6..=6 {
            let y = DVector::from_element(1, i as f64 * 0.7);
            assert!((vap.eval(&y).unwrap() - l1.eval(&y).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn sup_route_matches_closed_forms() {
        let pens = [
            PlqPenalty::l2(),
            PlqPenalty::l1(),
            PlqPenalty::l1_laplace(),
            PlqPenalty::huber(0.8).unwrap(),
            PlqPenalty::vapnik(0.4).unwrap(),
        ];
        for pen in &pens {
            for i in -8..=8 {
                let y = DVector::from_element(1, 0.37 * i as f64);
                let direct = pen.eval(&y).unwrap();
                let sup = pen.eval_sup(&y).unwrap();
                assert!(
                    (direct - sup).abs() < 1e-7 * (1.0 + direct.abs()),
                    "{:?} at {}: closed {direct} vs sup {sup}",
                    pen.kind(),
                    y[0]
                );
            }
        }
    }

    #[test]
    fn midpoint_convexity() {
        let pens = [
            PlqPenalty::l1(),
            PlqPenalty::huber(1.3).unwrap(),
            PlqPenalty::vapnik(0.2).unwrap(),
        ];
        for pen in &pens {
            for i in 0..40 {
                let a = DVector::from_element(1, ((i * 7) % 11) as f64 - 5.0);
                let b = DVector::from_element(1, ((i * 13) % 17) as f64 * 0.5 - 4.0);
                let mid = (&a + &b) * 0.5;
                let lhs = pen.eval(&mid).unwrap();
                let rhs = 0.5 * (pen.eval(&a).unwrap() + pen.eval(&b).unwrap());
                assert!(lhs <= rhs + 1e-10);
            }
        }
    }

    #[test]
    fn coercivity_catalog() {
        assert!(check_coercivity_catalog(&PlqPenalty::l2()).unwrap());
        assert!(check_coercivity_catalog(&PlqPenalty::l1()).unwrap());
        assert!(check_coercivity_catalog(&PlqPenalty::huber(2.0).unwrap()).unwrap());
        assert!(check_coercivity_catalog(&PlqPenalty::vapnik(0.1).unwrap()).unwrap());
        // synthetic M = 0, U = R: out of catalog
        let gen = PlqPenalty::general(
            DMatrix::zeros(1, 0),
            DVector::zeros(0),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
        )
        .unwrap();
        assert!(matches!(check_coercivity_catalog(&gen), Err(Error::NotInCatalog)));
        // and its sup is unbounded away from zero
        assert!(matches!(
            gen.eval(&DVector::from_element(1, 1.0)),
            Err(Error::Unbounded(_))
        ));
    }

    #[test]
    fn tiled_penalty_sums_components() {
        let pen = PlqPenalty::huber(1.0).unwrap();
        let tiled = pen.tile(3).unwrap();
        let y = DVector::from_column_slice(&[0.5, -2.0, 3.0]);
        let want: f64 = y
            .iter()
            .map(|&v| pen.eval(&DVector::from_element(1, v)).unwrap())
            .sum();
        assert!((tiled.eval(&y).unwrap() - want).abs() < 1e-14);
    }

    fn demo_model(horizon: usize) -> LinearStateSpace {
        let mut m = smooth_signal_model(horizon, 0.35, 1.0, 0.25).unwrap();
        for (i, s) in m.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (0.5 * i as f64).sin() + if i == 3 { 4.0 } else { 0.0 });
        }
        m.init_mean = DVector::from_column_slice(&[0.5, 0.0]);
        m
    }

    #[test]
    fn gaussian_case_reduces_to_linear_smoother() {
        let model = demo_model(8);
        let sol = smooth_plq(&model, &PlqPenalty::l2(), &PlqPenalty::l2(), &PlqOptions::default())
            .unwrap();
        let lin = crate::linear::smooth(&model).unwrap();
        assert!(
            (sol.x.as_dvector() - lin.x.as_dvector()).amax() < 1e-8,
            "plq(L2, L2) deviates from the linear smoother"
        );
    }

    #[test]
    fn laplace_measurement_matches_robust_smoother() {
        let model = demo_model(10);
        // tighten both interior-point solves so the comparison measures the
        // algebraic equivalence of the formulations, not solver tolerance
        let sol = smooth_plq(
            &model,
            &PlqPenalty::l2(),
            &PlqPenalty::l1_laplace(),
            &PlqOptions { tol: 1e-9, ..Default::default() },
        )
        .unwrap();
        let nl = model.as_nonlinear();
        let (rob, _) = crate::robust::smooth_l1_laplace(
            &nl,
            None,
            &crate::nonlinear::GnOptions::default(),
            &crate::robust::L1Options { tol: 1e-9, ..Default::default() },
        )
        .unwrap();
        assert!(
            (sol.x.as_dvector() - rob.x.as_dvector()).amax() < 1e-6,
            "plq(L2, L1-laplace) deviates from the robust smoother by {}",
            (sol.x.as_dvector() - rob.x.as_dvector()).amax()
        );
    }

    #[test]
    fn vapnik_band_gives_zero_loss_inside() {
        // with a wide band and no outliers, many residuals sit inside the
        // band and contribute nothing
        let mut model = smooth_signal_model(12, 0.3, 1.0, 1.0).unwrap();
        for (i, s) in model.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, (0.4 * i as f64).sin() * 0.1);
        }
        let eps = 0.45;
        let sol = smooth_plq(
            &model,
            &PlqPenalty::l2(),
            &PlqPenalty::vapnik(eps).unwrap(),
            &PlqOptions::default(),
        )
        .unwrap();
        let mut inside = 0;
        for (k, s) in model.steps.iter().enumerate() {
            let res = (s.meas.clone() * sol.x.block(k))[(0, 0)] - s.meas_val[0];
            if res.abs() < eps - 1e-6 {
                inside += 1;
            }
        }
        assert!(inside > 6, "only {inside} of 12 residuals inside the band");
        // and the objective's measurement part is small
        let obj = plq_objective(
            &model,
            &PlqPenalty::l2(),
            &PlqPenalty::vapnik(eps).unwrap(),
            &sol.x,
        )
        .unwrap();
        assert!(obj >= 0.0);
    }

    #[test]
    fn huber_between_l2_and_l1() {
        // pointwise: huber <= l2 and huber <= K * l1 shape
        let hub = PlqPenalty::huber(1.0).unwrap();
        let l2 = PlqPenalty::l2();
        for i in -10..=10 {
            let y = DVector::from_element(1, 0.5 * i as f64);
            assert!(hub.eval(&y).unwrap() <= l2.eval(&y).unwrap() + 1e-12);
        }
    }
}
