//! State-space problem definitions and the catalog of concrete models used by
//! the experiment scenarios.
//!
//! A problem over `N` time steps consists of a process model
//! `x_k = g_k(x_{k-1}) + w_k` with covariance `Q_k`, a measurement model
//! `z_k = h_k(x_k) + v_k` with covariance `R_k`, and a known initial state.
//! The first process block is special: the model carries `g_1(x_0)` as a
//! fixed vector (the initial prediction) rather than evaluating `g_1`.
//! Measurement dimensions `m(k)` may vary with `k`; `m(k) = 0` encodes a
//! missing measurement.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::blocktri::BlockVector;
use crate::{Error, Result};

/// Time-indexed process map `g_k` with Jacobian.
///
/// `k` is 1-based. `k = 1` is only ever evaluated by the simulator (the
/// smoothers use the model's stored `g_1(x_0)` instead). Implementors should
/// provide an analytic [`Transition::jacobian`]; the default falls back to
/// central finite differences, which is slower and accurate to about `1e-9`.
pub trait Transition: Send + Sync {
    fn eval(&self, k: usize, x_prev: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, k: usize, x_prev: &DVector<f64>) -> DMatrix<f64> {
        finite_diff_jacobian(|v| self.eval(k, v), x_prev, x_prev.len())
    }
}

/// Time-indexed measurement map `h_k` with Jacobian; `dim(k)` is `m(k)`.
pub trait Measurement: Send + Sync {
    fn dim(&self, k: usize) -> usize;

    fn eval(&self, k: usize, x: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        finite_diff_jacobian(|v| self.eval(k, v), x, self.dim(k))
    }
}

/// Central-difference Jacobian with step `1e-6 * (1 + |x|)`.
pub fn finite_diff_jacobian<F>(f: F, x: &DVector<f64>, out_dim: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let h = 1e-6 * (1.0 + x.norm());
    let mut jac = DMatrix::zeros(out_dim, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..n {
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &col);
        xp[j] = x[j];
        xm[j] = x[j];
    }
    jac
}

/// Linear-Gaussian state-space problem.
///
/// Per step `k`: transition `G_k` (ignored at `k = 1`, where `init_mean`
/// plays the role of `G_1 x_0`), process covariance `Q_k`, measurement matrix
/// `H_k` of shape `m(k) x n`, measurement covariance `R_k`, measurement `z_k`.
#[derive(Debug, Clone)]
pub struct LinearStateSpace {
    pub init_mean: DVector<f64>,
    pub steps: Vec<LinearStep>,
}

#[derive(Debug, Clone)]
pub struct LinearStep {
    pub trans: DMatrix<f64>,
    pub proc_cov: DMatrix<f64>,
    pub meas: DMatrix<f64>,
    pub meas_cov: DMatrix<f64>,
    pub meas_val: DVector<f64>,
}

impl LinearStateSpace {
    pub fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if n == 0 || self.steps.is_empty() {
            return Err(Error::ShapeMismatch("empty model".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            let m = s.meas.nrows();
            if s.trans.nrows() != n
                || s.trans.ncols() != n
                || s.proc_cov.nrows() != n
                || s.proc_cov.ncols() != n
                || s.meas.ncols() != n
                || s.meas_cov.nrows() != m
                || s.meas_cov.ncols() != m
                || s.meas_val.len() != m
            {
                return Err(Error::ShapeMismatch(format!("inconsistent shapes at step {}", i + 1)));
            }
        }
        Ok(())
    }

    /// Replace all measurements. `z[k]` must match `m(k+1)`.
    pub fn with_measurements(mut self, z: Vec<DVector<f64>>) -> Result<Self> {
        if z.len() != self.steps.len() {
            return Err(Error::ShapeMismatch("measurement count != horizon".into()));
        }
        for (s, zk) in self.steps.iter_mut().zip(z) {
            if zk.len() != s.meas.nrows() {
                return Err(Error::ShapeMismatch("measurement length != m(k)".into()));
            }
            s.meas_val = zk;
        }
        Ok(self)
    }

    /// View this model as a nonlinear one (affine maps, exact Jacobians).
    pub fn as_nonlinear(&self) -> NonlinearStateSpace {
        let n = self.state_dim();
        let trans: Vec<DMatrix<f64>> = self.steps.iter().map(|s| s.trans.clone()).collect();
        let meas: Vec<DMatrix<f64>> = self.steps.iter().map(|s| s.meas.clone()).collect();
        NonlinearStateSpace {
            state_dim: n,
            x0: DVector::zeros(n),
            init_mean: self.init_mean.clone(),
            transition: Arc::new(MatrixTransition { mats: trans }),
            measurement: Arc::new(MatrixMeasurement { mats: meas }),
            proc_cov: self.steps.iter().map(|s| s.proc_cov.clone()).collect(),
            meas_cov: self.steps.iter().map(|s| s.meas_cov.clone()).collect(),
            meas_val: self.steps.iter().map(|s| s.meas_val.clone()).collect(),
        }
    }
}

struct MatrixTransition {
    mats: Vec<DMatrix<f64>>,
}

impl Transition for MatrixTransition {
    fn eval(&self, k: usize, x_prev: &DVector<f64>) -> DVector<f64> {
        &self.mats[k - 1] * x_prev
    }

    fn jacobian(&self, k: usize, _x_prev: &DVector<f64>) -> DMatrix<f64> {
        self.mats[k - 1].clone()
    }
}

struct MatrixMeasurement {
    mats: Vec<DMatrix<f64>>,
}

impl Measurement for MatrixMeasurement {
    fn dim(&self, k: usize) -> usize {
        self.mats[k - 1].nrows()
    }

    fn eval(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.mats[k - 1] * x
    }

    fn jacobian(&self, k: usize, _x: &DVector<f64>) -> DMatrix<f64> {
        self.mats[k - 1].clone()
    }
}

/// Nonlinear state-space problem.
#[derive(Clone)]
pub struct NonlinearStateSpace {
    pub state_dim: usize,
    /// True initial state; the simulation starting point.
    pub x0: DVector<f64>,
    /// The model's (possibly misspecified) estimate of `g_1(x0)`.
    pub init_mean: DVector<f64>,
    pub transition: Arc<dyn Transition>,
    pub measurement: Arc<dyn Measurement>,
    /// `Q_k`, `k = 1..N` (`proc_cov[0]` is the initial-state covariance).
    pub proc_cov: Vec<DMatrix<f64>>,
    pub meas_cov: Vec<DMatrix<f64>>,
    pub meas_val: Vec<DVector<f64>>,
}

impl NonlinearStateSpace {
    pub fn horizon(&self) -> usize {
        self.proc_cov.len()
    }

    pub fn with_measurements(mut self, z: Vec<DVector<f64>>) -> Result<Self> {
        if z.len() != self.horizon() {
            return Err(Error::ShapeMismatch("measurement count != horizon".into()));
        }
        self.meas_val = z;
        Ok(self)
    }

    fn check_state(&self, x: &BlockVector) -> Result<()> {
        if x.block_dim() != self.state_dim || x.len() != self.horizon() {
            return Err(Error::ShapeMismatch(format!(
                "trajectory has {} blocks of dim {}, model expects {} of dim {}",
                x.len(),
                x.block_dim(),
                self.horizon(),
                self.state_dim
            )));
        }
        Ok(())
    }

    /// Stacked process and measurement maps.
    ///
    /// The process stack has block 1 equal to `x_1` and block `k` equal to
    /// `x_k - g_k(x_{k-1})` for `k >= 2`; the measurement stack is
    /// `h_k(x_k)` per step.
    pub fn eval_stacked(&self, x: &BlockVector) -> Result<(BlockVector, Vec<DVector<f64>>)> {
        self.check_state(x)?;
        let len = self.horizon();
        let mut g = BlockVector::zeros(self.state_dim, len);
        g.set_block(0, &x.block_owned(0));
        for k in 1..len {
            let pred = self.transition.eval(k + 1, &x.block_owned(k - 1));
            g.set_block(k, &(x.block_owned(k) - pred));
        }
        let h = (0..len).map(|k| self.measurement.eval(k + 1, &x.block_owned(k))).collect();
        Ok((g, h))
    }

    /// First-order model at `x`: transition Jacobians `G_k`, measurement
    /// Jacobians `H_k`, and shifted offsets `w - g(x)`, `z - h(x)`.
    pub fn linearize(&self, x: &BlockVector) -> Result<Linearization> {
        self.check_state(x)?;
        let len = self.horizon();
        let (g, h) = self.eval_stacked(x)?;

        // w - g(x): w has init_mean in its first block, zeros after.
        let mut w_shift = BlockVector::zeros(self.state_dim, len);
        w_shift.set_block(0, &(&self.init_mean - g.block_owned(0)));
        for k in 1..len {
            w_shift.set_block(k, &(-g.block_owned(k)));
        }

        let trans = (1..len)
            .map(|k| self.transition.jacobian(k + 1, &x.block_owned(k - 1)))
            .collect();
        let meas = (0..len).map(|k| self.measurement.jacobian(k + 1, &x.block_owned(k))).collect();
        let z_shift = self
            .meas_val
            .iter()
            .zip(h.iter())
            .map(|(z, hx)| z - hx)
            .collect();
        Ok(Linearization { trans, meas, w_shift, z_shift })
    }
}

/// Output of [`NonlinearStateSpace::linearize`]: the affine model whose
/// least-squares solution is the Gauss-Newton direction.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// `G_k = g_k'(x_{k-1})` for `k = 2..N` (length `N - 1`).
    pub trans: Vec<DMatrix<f64>>,
    /// `H_k = h_k'(x_k)` for `k = 1..N`.
    pub meas: Vec<DMatrix<f64>>,
    /// `w - g(x)` stacked.
    pub w_shift: BlockVector,
    /// `z - h(x)` per step.
    pub z_shift: Vec<DVector<f64>>,
}

/// Affine per-step inequality constraints `B_k x_k <= b_k`.
#[derive(Debug, Clone)]
pub struct AffineConstraints {
    pub blocks: Vec<DMatrix<f64>>,
    pub bounds: Vec<DVector<f64>>,
}

impl AffineConstraints {
    pub fn validate(&self, n: usize, horizon: usize) -> Result<()> {
        if self.blocks.len() != horizon || self.bounds.len() != horizon {
            return Err(Error::ShapeMismatch("constraint count != horizon".into()));
        }
        for (k, (b, v)) in self.blocks.iter().zip(&self.bounds).enumerate() {
            if b.ncols() != n || b.nrows() != v.len() {
                return Err(Error::ShapeMismatch(format!("constraint shapes at step {}", k + 1)));
            }
        }
        Ok(())
    }

    pub fn total_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }
}

/// Smooth per-step constraint functions `xi_k(x_k) <= b_k`.
pub trait ConstraintFn: Send + Sync {
    fn dim(&self, k: usize) -> usize;

    fn eval(&self, k: usize, x: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        finite_diff_jacobian(|v| self.eval(k, v), x, self.dim(k))
    }
}

/// Either affine constraints or smooth nonlinear ones.
#[derive(Clone)]
pub enum ConstraintSet {
    Affine(AffineConstraints),
    Nonlinear { f: Arc<dyn ConstraintFn>, bounds: Vec<DVector<f64>> },
}

impl ConstraintSet {
    /// Constraint rows `xi_k'(x_k)` and right-hand sides `b_k - xi_k(x_k)`
    /// for the direction subproblem `B_k d_k <= b_k - xi_k(x_k)` at `x`.
    /// For affine sets this is `B_k` and `b_k - B_k x_k`.
    pub fn linearize_at(&self, x: &BlockVector) -> AffineConstraints {
        match self {
            ConstraintSet::Affine(a) => {
                let bounds = (0..x.len())
                    .map(|k| &a.bounds[k] - &a.blocks[k] * x.block(k))
                    .collect();
                AffineConstraints { blocks: a.blocks.clone(), bounds }
            }
            ConstraintSet::Nonlinear { f, bounds } => {
                let blocks: Vec<DMatrix<f64>> = (0..x.len())
                    .map(|k| f.jacobian(k + 1, &x.block_owned(k)))
                    .collect();
                let shifted = (0..x.len())
                    .map(|k| &bounds[k] - f.eval(k + 1, &x.block_owned(k)))
                    .collect();
                AffineConstraints { blocks, bounds: shifted }
            }
        }
    }

    /// Componentwise violation `max(xi(x) - b, 0)` stacked over all steps.
    pub fn violation(&self, x: &BlockVector) -> DVector<f64> {
        let residual = |k: usize| -> DVector<f64> {
            match self {
                ConstraintSet::Affine(a) => &a.blocks[k] * x.block(k) - &a.bounds[k],
                ConstraintSet::Nonlinear { f, bounds } => {
                    f.eval(k + 1, &x.block_owned(k)) - &bounds[k]
                }
            }
        };
        let mut vals = Vec::new();
        for k in 0..x.len() {
            let r = residual(k);
            vals.extend(r.iter().map(|v| v.max(0.0)));
        }
        DVector::from_vec(vals)
    }
}

// ---------------------------------------------------------------------------
// Model catalog
// ---------------------------------------------------------------------------

/// Two-state "smooth signal" process: state is (derivative, value) with
/// `G_k = [[1, 0], [dt, 1]]`, `Q_k = sigma2 * [[dt, dt^2/2], [dt^2/2, dt^3/3]]`
/// and direct measurement of the value, `H_k = [0 1]`.
///
/// Measurements are zero-initialized; fill via `with_measurements`.
pub fn smooth_signal_model(
    horizon: usize,
    dt: f64,
    sigma2: f64,
    meas_var: f64,
) -> Result<LinearStateSpace> {
    if dt <= 0.0 || sigma2 <= 0.0 || meas_var <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "smooth signal model needs dt, sigma2, meas_var > 0 (got {dt}, {sigma2}, {meas_var})"
        )));
    }
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    let trans = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, dt, 1.0]);
    let q = sde_cov(dt, sigma2);
    let h = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    let r = DMatrix::from_element(1, 1, meas_var);
    let steps = (0..horizon)
        .map(|_| LinearStep {
            trans: trans.clone(),
            proc_cov: q.clone(),
            meas: h.clone(),
            meas_cov: r.clone(),
            meas_val: DVector::zeros(1),
        })
        .collect();
    Ok(LinearStateSpace { init_mean: DVector::zeros(2), steps })
}

/// Integrated-Brownian-motion covariance over one step.
pub fn sde_cov(dt: f64, sigma2: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        2,
        2,
        &[
            sigma2 * dt,
            sigma2 * dt * dt / 2.0,
            sigma2 * dt * dt / 2.0,
            sigma2 * dt * dt * dt / 3.0,
        ],
    )
}

/// Euler-discretized Van der Pol oscillator.
///
/// The damping term is evaluated at the *new* state: the position update is
/// explicit and the velocity update is implicit in the new velocity, which is
/// linear and solvable in closed form. The fully explicit step is unstable at
/// the coarse step sizes used by the benchmark scenarios (it reaches infinity
/// within ~15 steps at `mu = 2`, `dt = 0.375`), while this form stays on the
/// limit cycle. Requires `mu * dt < 1` so the implicit solve never divides by
/// zero.
pub struct VanDerPol {
    pub mu: f64,
    pub dt: f64,
}

impl VanDerPol {
    /// New position and the denominator of the implicit velocity update.
    fn advance(&self, x: &DVector<f64>) -> (f64, f64, f64) {
        let x1n = x[0] + x[1] * self.dt;
        let denom = 1.0 - self.mu * self.dt * (1.0 - x1n * x1n);
        let x2n = (x[1] - x1n * self.dt) / denom;
        (x1n, x2n, denom)
    }
}

impl Transition for VanDerPol {
    fn eval(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        let (x1n, x2n, _) = self.advance(x);
        DVector::from_column_slice(&[x1n, x2n])
    }

    fn jacobian(&self, _k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let (x1n, x2n, denom) = self.advance(x);
        // d x2n / d x1n, holding the old state's direct contribution apart
        let d21 = (-self.dt - 2.0 * self.mu * self.dt * x1n * x2n) / denom;
        DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0,
                self.dt,
                d21,
                d21 * self.dt + 1.0 / denom,
            ],
        )
    }
}

struct FirstComponent;

impl Measurement for FirstComponent {
    fn dim(&self, _k: usize) -> usize {
        1
    }

    fn eval(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0])
    }

    fn jacobian(&self, _k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(1, x.len());
        j[(0, 0)] = 1.0;
        j
    }
}

/// Van der Pol smoothing problem: Euler process model, direct measurement of
/// the first state component.
#[allow(clippy::too_many_arguments)]
pub fn vanderpol_model(
    mu: f64,
    horizon: usize,
    dt: f64,
    init_cov: DMatrix<f64>,
    proc_var: f64,
    x0: DVector<f64>,
    init_mean: DVector<f64>,
    meas_var: f64,
) -> Result<NonlinearStateSpace> {
    if dt < 0.0 || proc_var <= 0.0 || meas_var <= 0.0 || horizon == 0 {
        return Err(Error::InvalidParameter(
            "van der pol model needs dt >= 0, proc_var > 0, meas_var > 0, horizon >= 1".into(),
        ));
    }
    if mu * dt >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "van der pol discretization needs mu * dt < 1 (got {})",
            mu * dt
        )));
    }
    let mut proc_cov = vec![DMatrix::identity(2, 2) * proc_var; horizon];
    proc_cov[0] = init_cov;
    Ok(NonlinearStateSpace {
        state_dim: 2,
        x0,
        init_mean,
        transition: Arc::new(VanDerPol { mu, dt }),
        measurement: Arc::new(FirstComponent),
        proc_cov,
        meas_cov: vec![DMatrix::from_element(1, 1, meas_var); horizon],
        meas_val: vec![DVector::zeros(1); horizon],
    })
}

const SHIP_STATIONS: [(f64, f64); 2] = [(0.0, 0.0), (2.0 * std::f64::consts::PI, 0.0)];

/// Range measurements from two shore stations to the ship position
/// `(x_2, x_4)`.
pub struct ShipRanges;

impl Measurement for ShipRanges {
    fn dim(&self, _k: usize) -> usize {
        2
    }

    fn eval(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            2,
            SHIP_STATIONS
                .iter()
                .map(|(sx, sy)| ((x[1] - sx).powi(2) + (x[3] - sy).powi(2)).sqrt()),
        )
    }

    fn jacobian(&self, _k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2, 4);
        for (i, (sx, sy)) in SHIP_STATIONS.iter().enumerate() {
            let dx = x[1] - sx;
            let dy = x[3] - sy;
            let d = (dx * dx + dy * dy).sqrt().max(1e-12);
            j[(i, 1)] = dx / d;
            j[(i, 3)] = dy / d;
        }
        j
    }
}

/// Shoreline constraint `1.25 - sin(x_2) - x_4 <= 0`.
pub struct ShoreConstraint;

impl ConstraintFn for ShoreConstraint {
    fn dim(&self, _k: usize) -> usize {
        1
    }

    fn eval(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 1.25 - x[1].sin() - x[3])
    }

    fn jacobian(&self, _k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 4, &[0.0, -x[1].cos(), 0.0, -1.0])
    }
}

/// True ship state at time `t`: `[1, t, -cos t, 1.3 - sin t]`.
pub fn ship_truth(t: f64) -> DVector<f64> {
    DVector::from_column_slice(&[1.0, t, -t.cos(), 1.3 - t.sin()])
}

/// Ship-tracking problem: two stacked smooth-signal blocks (velocity/position
/// for each coordinate), nonlinear range measurements from two shore
/// stations, and the shoreline constraint.
pub fn ship_model(
    horizon: usize,
    dt: f64,
    meas_var: f64,
) -> Result<(NonlinearStateSpace, ConstraintSet)> {
    if dt <= 0.0 || meas_var <= 0.0 || horizon == 0 {
        return Err(Error::InvalidParameter(
            "ship model needs dt > 0, meas_var > 0, horizon >= 1".into(),
        ));
    }
    // Unit (4,4) entry: both coordinates use the same velocity/position
    // stacking; a zero there would make the process singular in x4.
    let trans = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, 0.0, 0.0, //
            dt, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, dt, 1.0,
        ],
    );
    let qss = sde_cov(dt, 1.0);
    let mut q = DMatrix::zeros(4, 4);
    q.view_mut((0, 0), (2, 2)).copy_from(&qss);
    q.view_mut((2, 2), (2, 2)).copy_from(&qss);

    let mut proc_cov = vec![q; horizon];
    proc_cov[0] = DMatrix::identity(4, 4) * 100.0;

    let x0 = ship_truth(0.0);
    let init_mean = ship_truth(dt);
    let model = NonlinearStateSpace {
        state_dim: 4,
        x0,
        init_mean,
        transition: Arc::new(MatrixTransition { mats: vec![trans; horizon] }),
        measurement: Arc::new(ShipRanges),
        proc_cov,
        meas_cov: vec![DMatrix::identity(2, 2) * meas_var; horizon],
        meas_val: vec![DVector::zeros(2); horizon],
    };
    let constraints = ConstraintSet::Nonlinear {
        f: Arc::new(ShoreConstraint),
        bounds: vec![DVector::zeros(1); horizon],
    };
    Ok((model, constraints))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sde_cov_matches_closed_form() {
        let q = sde_cov(1.0, 1.0);
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0 / 3.0]);
        assert!((q - want).norm() < 1e-15);
    }

    #[test]
    fn smooth_signal_shapes_and_spd() {
        let m = smooth_signal_model(5, 0.1, 1.0, 0.25).unwrap();
        m.validate().unwrap();
        assert_eq!(m.steps[0].meas, DMatrix::from_row_slice(1, 2, &[0.0, 1.0]));
        let eig = m.steps[0].proc_cov.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
        assert!(m.steps[0].proc_cov.clone().cholesky().is_some());
        assert!(m.steps[0].meas_cov.clone().cholesky().is_some());
    }

    #[test]
    fn smooth_signal_rejects_bad_params() {
        assert!(smooth_signal_model(5, 0.0, 1.0, 1.0).is_err());
        assert!(smooth_signal_model(5, 0.1, -1.0, 1.0).is_err());
    }

    #[test]
    fn eval_stacked_identity_process() {
        // identity g_k, N=2, x=(a,b) -> g(x) = (a, b - a)
        let mut m = smooth_signal_model(2, 1.0, 1.0, 1.0).unwrap();
        for s in &mut m.steps {
            s.trans = DMatrix::identity(2, 2);
        }
        let nl = m.as_nonlinear();
        let x = BlockVector::from_blocks(&[
            DVector::from_column_slice(&[1.0, 2.0]),
            DVector::from_column_slice(&[5.0, 7.0]),
        ])
        .unwrap();
        let (g, _) = nl.eval_stacked(&x).unwrap();
        assert_eq!(g.block_owned(0), DVector::from_column_slice(&[1.0, 2.0]));
        assert_eq!(g.block_owned(1), DVector::from_column_slice(&[4.0, 5.0]));
    }

    #[test]
    fn eval_stacked_zero_state_linear() {
        let m = smooth_signal_model(3, 0.5, 1.0, 1.0).unwrap().as_nonlinear();
        let x = BlockVector::zeros(2, 3);
        let (g, h) = m.eval_stacked(&x).unwrap();
        assert!(g.norm() < 1e-15);
        assert!(h.iter().all(|v| v.norm() < 1e-15));
    }

    #[test]
    fn vanderpol_jacobian_at_zero() {
        let mu = 2.0;
        let dt = 0.375;
        let vdp = VanDerPol { mu, dt };
        let j = vdp.jacobian(2, &DVector::zeros(2));
        // at the origin the new position is 0, so the implicit denominator is
        // 1 - mu*dt and the hand-derived Jacobian is:
        let denom = 1.0 - mu * dt;
        let want =
            DMatrix::from_row_slice(2, 2, &[1.0, dt, -dt / denom, (1.0 - dt * dt) / denom]);
        assert!((j - want).norm() < 1e-14);
    }

    #[test]
    fn vanderpol_jacobian_matches_finite_differences() {
        let vdp = VanDerPol { mu: 2.0, dt: 0.375 };
        let x = DVector::from_column_slice(&[0.7, -1.3]);
        let fd = finite_diff_jacobian(|v| vdp.eval(2, v), &x, 2);
        let an = vdp.jacobian(2, &x);
        assert!((fd - &an).norm() / (1.0 + an.norm()) < 1e-5);
    }

    #[test]
    fn vanderpol_stacked_matches_componentwise_euler() {
        let m = vanderpol_model(
            2.0,
            4,
            0.375,
            DMatrix::identity(2, 2) * 0.1,
            0.01,
            DVector::from_column_slice(&[0.0, -0.5]),
            DVector::from_column_slice(&[0.1, -0.4]),
            1.0,
        )
        .unwrap();
        // trajectory propagated from x0 with the scalar form of the update
        let (mu, dt) = (2.0, 0.375);
        let mut xs = Vec::new();
        let mut cur = (0.0_f64, -0.5_f64);
        for _ in 0..4 {
            let x1n = cur.0 + cur.1 * dt;
            let x2n = (cur.1 - x1n * dt) / (1.0 - mu * dt * (1.0 - x1n * x1n));
            cur = (x1n, x2n);
            xs.push(DVector::from_column_slice(&[cur.0, cur.1]));
        }
        let x = BlockVector::from_blocks(&xs).unwrap();
        let (g, h) = m.eval_stacked(&x).unwrap();
        assert!((g.block_owned(0) - xs[0].clone()).norm() < 1e-14);
        for k in 1..4 {
            // consecutive states come from exact propagation, so g(x)_k = 0
            assert!(g.block_owned(k).norm() < 1e-12);
            assert!((h[k][0] - xs[k][0]).abs() < 1e-14);
        }
    }

    #[test]
    fn vanderpol_zero_dt_is_identity() {
        let vdp = VanDerPol { mu: 2.0, dt: 0.0 };
        let x = DVector::from_column_slice(&[0.3, 0.9]);
        assert_eq!(vdp.eval(2, &x), x);
    }

    #[test]
    fn affine_linearization_is_exact() {
        let mut m = smooth_signal_model(4, 0.2, 1.0, 0.5).unwrap();
        for (i, s) in m.steps.iter_mut().enumerate() {
            s.meas_val = DVector::from_element(1, i as f64);
        }
        m.init_mean = DVector::from_column_slice(&[0.5, -0.5]);
        let nl = m.as_nonlinear();
        let x = BlockVector::from_flat(
            2,
            DVector::from_column_slice(&[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]),
        )
        .unwrap();
        let lin = nl.linearize(&x).unwrap();
        for (k, g) in lin.trans.iter().enumerate() {
            assert_eq!(g, &m.steps[k + 1].trans);
        }
        // w - g(x) at an affine model is linear in x; spot-check block 0
        let w0 = lin.w_shift.block_owned(0);
        assert!((w0 - (&m.init_mean - x.block_owned(0))).norm() < 1e-14);
    }

    #[test]
    fn ship_geometry() {
        let (model, cons) = ship_model(10, 0.1, 0.05).unwrap();
        // 3-4-5 triangle from station (0,0)
        let x = DVector::from_column_slice(&[0.0, 3.0, 0.0, 4.0]);
        let h = model.measurement.eval(1, &x);
        assert!((h[0] - 5.0).abs() < 1e-12);
        // constraint active at x2 = 0, x4 = 1.25
        let xa = DVector::from_column_slice(&[0.0, 0.0, 0.0, 1.25]);
        match cons {
            ConstraintSet::Nonlinear { f, .. } => {
                assert!((f.eval(1, &xa)[0]).abs() < 1e-12);
            }
            _ => panic!("expected nonlinear constraints"),
        }
    }

    #[test]
    fn measurement_default_jacobian_falls_back_to_finite_differences() {
        struct Raw;
        impl Measurement for Raw {
            fn dim(&self, _k: usize) -> usize {
                1
            }
            fn eval(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
                DVector::from_element(1, (x[0] * x[1]).sin())
            }
        }
        let x = DVector::from_column_slice(&[0.4, 1.1]);
        let j = Raw.jacobian(1, &x);
        let c = (x[0] * x[1]).cos();
        let want = DMatrix::from_row_slice(1, 2, &[x[1] * c, x[0] * c]);
        assert!((j - want).norm() < 1e-6);
    }
}
