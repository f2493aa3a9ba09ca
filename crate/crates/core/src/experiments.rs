//! Ground-truth simulation, Monte Carlo replication and the benchmark
//! scenarios.
//!
//! All randomness flows through counter-based ChaCha8 streams derived from a
//! single base seed: stream id `(cell << 40) ^ (replication << 8) ^ role`
//! with role 0 for process noise and role 1 for measurement noise. Methods
//! compared within a replication therefore see identical data (paired
//! comparisons), and a rerun with the same seed is bit-identical regardless
//! of thread scheduling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::blocktri::BlockVector;
use crate::linear::{self, SmootherSolution};
use crate::model::{
    self, smooth_signal_model, vanderpol_model, LinearStateSpace, NonlinearStateSpace,
};
use crate::nonlinear::{smooth_nonlinear, GnOptions};
use crate::plq::{smooth_plq, PlqOptions, PlqPenalty};
use crate::robust::{smooth_l1_laplace, L1Options};
use crate::{Error, Result};

/// Name of the generator backing every experiment stream; recorded in output
/// metadata so runs can be reproduced.
pub const RNG_NAME: &str = "chacha8";

/// Derive the deterministic stream for `(cell, replication, role)`.
pub fn stream_rng(seed: u64, cell: u64, rep: u64, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((cell << 40) ^ (rep << 8) ^ role);
    rng
}

/// Two-component Gaussian mixture `(1-p) N(0, base_var) + p N(0, outlier_var)`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseMixtureSpec {
    pub p: f64,
    pub base_var: f64,
    pub outlier_var: f64,
}

impl NoiseMixtureSpec {
    pub fn gaussian(var: f64) -> Self {
        NoiseMixtureSpec { p: 0.0, base_var: var, outlier_var: var }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidParameter(format!("mixture fraction {} not in [0,1]", self.p)));
        }
        if self.base_var <= 0.0 || self.outlier_var <= 0.0 {
            return Err(Error::InvalidParameter("mixture variances must be positive".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let var = if self.p > 0.0 && rng.gen::<f64>() < self.p {
            self.outlier_var
        } else {
            self.base_var
        };
        let g: f64 = rng.sample(StandardNormal);
        g * var.sqrt()
    }
}

fn sample_gaussian_vec(cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = cov.nrows();
    let white = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    match cov.clone().cholesky() {
        Some(ch) => ch.l() * white,
        None => white * 0.0,
    }
}

/// Simulate a trajectory `x_k = g_k(x_{k-1}) + w_k` from the model's true
/// initial state with the given per-step process covariances, and
/// measurements `z_k = h_k(x_k) + v_k` with componentwise mixture noise.
pub fn simulate(
    model: &NonlinearStateSpace,
    truth_proc_cov: &[DMatrix<f64>],
    noise: &NoiseMixtureSpec,
    rng_proc: &mut ChaCha8Rng,
    rng_meas: &mut ChaCha8Rng,
) -> Result<(BlockVector, Vec<DVector<f64>>)> {
    noise.validate()?;
    let len = model.horizon();
    if truth_proc_cov.len() != len {
        return Err(Error::ShapeMismatch("truth covariances do not match horizon".into()));
    }
    let mut truth = BlockVector::zeros(model.state_dim, len);
    let mut cur = model.x0.clone();
    for k in 0..len {
        cur = model.transition.eval(k + 1, &cur) + sample_gaussian_vec(&truth_proc_cov[k], rng_proc);
        truth.set_block(k, &cur);
    }
    let mut meas = Vec::with_capacity(len);
    for k in 0..len {
        let mut z = model.measurement.eval(k + 1, &truth.block_owned(k));
        for i in 0..z.len() {
            z[i] += noise.sample(rng_meas);
        }
        meas.push(z);
    }
    Ok((truth, meas))
}

/// Mean squared error `(1/N) sum_k |x_k - xhat_k|^2` (all state components).
pub fn mse(estimate: &BlockVector, truth: &BlockVector) -> Result<f64> {
    if estimate.block_dim() != truth.block_dim() || estimate.len() != truth.len() {
        return Err(Error::ShapeMismatch("estimate and truth shapes differ".into()));
    }
    let d = estimate.as_dvector() - truth.as_dvector();
    Ok(d.norm_squared() / truth.len() as f64)
}

/// Empirical percentile with linear interpolation; `values` need not be
/// sorted. `q` is in percent.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = (q / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Per-method replication outcomes for one mixture cell.
#[derive(Debug, Clone)]
pub struct MethodStats {
    pub method: String,
    pub per_rep: Vec<f64>,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl MethodStats {
    fn from_reps(method: &str, per_rep: Vec<f64>) -> Self {
        let median = percentile(&per_rep, 50.0);
        let lo95 = percentile(&per_rep, 2.5);
        let hi95 = percentile(&per_rep, 97.5);
        MethodStats { method: method.to_string(), per_rep, median, lo95, hi95 }
    }

    pub fn median_for<'a>(stats: &'a [MethodStats], name: &str) -> Option<&'a MethodStats> {
        stats.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub p: f64,
    pub phi: Option<f64>,
    pub methods: Vec<MethodStats>,
}

#[derive(Debug, Clone)]
pub struct MseReport {
    pub cells: Vec<CellReport>,
}

impl MseReport {
    pub fn cell(&self, p: f64, phi: Option<f64>) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| (c.p - p).abs() < 1e-12 && c.phi.unwrap_or(f64::NAN).total_cmp(&phi.unwrap_or(f64::NAN)) == std::cmp::Ordering::Equal)
    }

    /// Per-replication CSV: `cell_p, cell_phi, method, replication, mse`.
    pub fn render_replications_csv(&self) -> String {
        let mut out = String::from("cell_p,cell_phi,method,replication,mse\n");
        for cell in &self.cells {
            let phi = cell.phi.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            for m in &cell.methods {
                for (i, v) in m.per_rep.iter().enumerate() {
                    out.push_str(&format!("{},{},{},{},{}\n", cell.p, phi, m.method, i, v));
                }
            }
        }
        out
    }

    /// Summary CSV: `cell_p, cell_phi, method, median, lo95, hi95`.
    pub fn render_summary_csv(&self) -> String {
        let mut out = String::from("cell_p,cell_phi,method,median,lo95,hi95\n");
        for cell in &self.cells {
            let phi = cell.phi.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            for m in &cell.methods {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    cell.p, phi, m.method, m.median, m.lo95, m.hi95
                ));
            }
        }
        out
    }
}

/// Replication/seed layout shared by the table experiments.
#[derive(Debug, Clone)]
pub struct TableSpec {
    pub replications: usize,
    pub seed: u64,
    /// `(p, phi)` cells; `phi = None` is the nominal (uncontaminated) cell.
    pub cells: Vec<(f64, Option<f64>)>,
}

impl TableSpec {
    pub fn robust_linear(replications: usize, seed: u64) -> Self {
        TableSpec {
            replications,
            seed,
            cells: vec![
                (0.0, None),
                (0.1, Some(1.0)),
                (0.1, Some(4.0)),
                (0.1, Some(10.0)),
                (0.1, Some(100.0)),
            ],
        }
    }

    pub fn robust_vanderpol(replications: usize, seed: u64) -> Self {
        let mut cells = vec![(0.0, None)];
        for phi in [10.0, 100.0, 1000.0] {
            for p in [0.1, 0.2, 0.3] {
                cells.push((p, Some(phi)));
            }
        }
        TableSpec { replications, seed, cells }
    }

    fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidParameter("need at least one replication".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scenario: tracking a smooth sine signal (and its robust variant)
// ---------------------------------------------------------------------------

/// Smooth-signal scenario over two periods of a sine wave: state is
/// (derivative, value), truth `(cos t, sin t)`, direct noisy measurements of
/// the value.
pub struct SineScenario {
    pub model: LinearStateSpace,
    pub truth: BlockVector,
}

pub fn sine_scenario(horizon: usize, dt: f64, sigma2: f64, meas_var: f64) -> Result<SineScenario> {
    let mut m = smooth_signal_model(horizon, dt, sigma2, meas_var)?;
    let mut truth = BlockVector::zeros(2, horizon);
    for k in 0..horizon {
        let t = (k + 1) as f64 * dt;
        truth.set_block(k, &DVector::from_column_slice(&[t.cos(), t.sin()]));
    }
    m.init_mean = &m.steps[0].trans * DVector::from_column_slice(&[1.0, 0.0]);
    Ok(SineScenario { model: m, truth })
}

/// The robust-table variant: truth `(-cos t, -sin t)` over `[0, 4 pi]`,
/// nominal measurement variance 0.25.
pub fn robust_linear_scenario(horizon: usize) -> Result<SineScenario> {
    let dt = 4.0 * std::f64::consts::PI / horizon as f64;
    let mut m = smooth_signal_model(horizon, dt, 1.0, 0.25)?;
    let mut truth = BlockVector::zeros(2, horizon);
    for k in 0..horizon {
        let t = (k + 1) as f64 * dt;
        truth.set_block(k, &DVector::from_column_slice(&[-t.cos(), -t.sin()]));
    }
    m.init_mean = &m.steps[0].trans * DVector::from_column_slice(&[-1.0, 0.0]);
    Ok(SineScenario { model: m, truth })
}

/// Measurement-only resampling for fixed-truth scenarios.
pub fn measurements_from_truth(
    scenario: &SineScenario,
    noise: &NoiseMixtureSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    (0..scenario.truth.len())
        .map(|k| {
            let mut z = &scenario.model.steps[k].meas * scenario.truth.block(k);
            for i in 0..z.len() {
                z[i] += noise.sample(rng);
            }
            z
        })
        .collect()
}

/// Benchmark table over mixture cells: Gaussian filter (GKF), iterated
/// Gaussian smoother (IGS) and iterated Laplace smoother (ILS) on the
/// fixed-truth sine scenario.
pub fn run_robust_linear_table(spec: &TableSpec) -> Result<MseReport> {
    spec.validate()?;
    let scenario = robust_linear_scenario(100)?;
    let mut cells = Vec::new();
    for (cell_idx, &(p, phi)) in spec.cells.iter().enumerate() {
        let noise = NoiseMixtureSpec {
            p,
            base_var: 0.25,
            outlier_var: phi.unwrap_or(0.25),
        };
        let runs: Vec<Result<(f64, f64, f64)>> = (0..spec.replications)
            .into_par_iter()
            .map(|rep| {
                let mut rng = stream_rng(spec.seed, cell_idx as u64, rep as u64, 1);
                let z = measurements_from_truth(&scenario, &noise, &mut rng);
                let model = scenario.model.clone().with_measurements(z)?;

                let filt = linear::filter_estimates(&model)?;
                let gkf = mse(&BlockVector::from_blocks(&filt)?, &scenario.truth)?;

                let igs = mse(&linear::smooth(&model)?.x, &scenario.truth)?;

                let nl = model.as_nonlinear();
                let (ils_sol, _) = smooth_l1_laplace(
                    &nl,
                    None,
                    &GnOptions::default(),
                    &L1Options::default(),
                )?;
                let ils = mse(&ils_sol.x, &scenario.truth)?;
                Ok((gkf, igs, ils))
            })
            .collect();
        let mut gkf = Vec::with_capacity(spec.replications);
        let mut igs = Vec::with_capacity(spec.replications);
        let mut ils = Vec::with_capacity(spec.replications);
        for r in runs {
            let (a, b, c) = r?;
            gkf.push(a);
            igs.push(b);
            ils.push(c);
        }
        cells.push(CellReport {
            p,
            phi,
            methods: vec![
                MethodStats::from_reps("GKF", gkf),
                MethodStats::from_reps("IGS", igs),
                MethodStats::from_reps("ILS", ils),
            ],
        });
    }
    Ok(MseReport { cells })
}

// ---------------------------------------------------------------------------
// Scenario: Van der Pol oscillator
// ---------------------------------------------------------------------------

/// The oscillator smoothing problem; `robust = false` is the short horizon
/// (N = 80 over 30 time units), `robust = true` the longer contaminated one
/// (N = 164 over 16 time units).
pub fn vanderpol_scenario(robust: bool) -> Result<NonlinearStateSpace> {
    let (horizon, total) = if robust { (164, 16.0) } else { (80, 30.0) };
    vanderpol_model(
        2.0,
        horizon,
        total / horizon as f64,
        DMatrix::identity(2, 2) * 0.1,
        0.01,
        DVector::from_column_slice(&[0.0, -0.5]),
        DVector::from_column_slice(&[0.1, -0.4]),
        1.0,
    )
}

/// True per-step process covariance used to simulate oscillator ground truth
/// (variance 0.01 for every step, including the first).
pub fn vanderpol_truth_cov(model: &NonlinearStateSpace) -> Vec<DMatrix<f64>> {
    vec![DMatrix::identity(2, 2) * 0.01; model.horizon()]
}

/// Benchmark table over mixture cells: IGS vs ILS on simulated oscillator
/// ground truth with contaminated measurements.
pub fn run_robust_vdp_table(spec: &TableSpec) -> Result<MseReport> {
    spec.validate()?;
    let base = vanderpol_scenario(true)?;
    let truth_cov = vanderpol_truth_cov(&base);
    let mut cells = Vec::new();
    for (cell_idx, &(p, phi)) in spec.cells.iter().enumerate() {
        let noise = NoiseMixtureSpec {
            p,
            base_var: 1.0,
            outlier_var: phi.unwrap_or(1.0),
        };
        let runs: Vec<Result<(f64, f64)>> = (0..spec.replications)
            .into_par_iter()
            .map(|rep| {
                let mut rng_proc = stream_rng(spec.seed, cell_idx as u64, rep as u64, 0);
                let mut rng_meas = stream_rng(spec.seed, cell_idx as u64, rep as u64, 1);
                let (truth, z) =
                    simulate(&base, &truth_cov, &noise, &mut rng_proc, &mut rng_meas)?;
                let model = base.clone().with_measurements(z)?;

                let (igs_sol, _) = smooth_nonlinear(&model, None, &GnOptions::default())?;
                let igs = mse(&igs_sol.x, &truth)?;
                let (ils_sol, _) = smooth_l1_laplace(
                    &model,
                    None,
                    &GnOptions::default(),
                    &L1Options::default(),
                )?;
                let ils = mse(&ils_sol.x, &truth)?;
                Ok((igs, ils))
            })
            .collect();
        let mut igs = Vec::with_capacity(spec.replications);
        let mut ils = Vec::with_capacity(spec.replications);
        for r in runs {
            let (a, b) = r?;
            igs.push(a);
            ils.push(b);
        }
        cells.push(CellReport {
            p,
            phi,
            methods: vec![
                MethodStats::from_reps("IGS", igs),
                MethodStats::from_reps("ILS", ils),
            ],
        });
    }
    Ok(MseReport { cells })
}

// ---------------------------------------------------------------------------
// Outlier removal baseline
// ---------------------------------------------------------------------------

/// Classic screen-and-refit baseline: fit the Gaussian smoother, drop every
/// measurement component whose absolute residual exceeds three measurement
/// standard deviations, refit once on the survivors. Returns the refit and
/// the number of removed components.
pub fn outlier_removal_baseline(model: &LinearStateSpace) -> Result<(SmootherSolution, usize)> {
    let first = linear::smooth(model)?;
    let mut screened = model.clone();
    let mut removed = 0;
    let mut kept_any = false;
    for (k, step) in model.steps.iter().enumerate() {
        let m = step.meas.nrows();
        if m == 0 {
            continue;
        }
        let res = &step.meas * first.x.block(k) - &step.meas_val;
        let mut keep_rows = Vec::new();
        for i in 0..m {
            let sigma = step.meas_cov[(i, i)].sqrt();
            if res[i].abs() <= 3.0 * sigma {
                keep_rows.push(i);
            } else {
                removed += 1;
            }
        }
        if keep_rows.len() < m {
            let kept = keep_rows.len();
            let mut meas = DMatrix::zeros(kept, model.state_dim());
            let mut meas_cov = DMatrix::zeros(kept, kept);
            let mut meas_val = DVector::zeros(kept);
            for (new_i, &old_i) in keep_rows.iter().enumerate() {
                meas.row_mut(new_i).copy_from(&step.meas.row(old_i));
                meas_val[new_i] = step.meas_val[old_i];
                for (new_j, &old_j) in keep_rows.iter().enumerate() {
                    meas_cov[(new_i, new_j)] = step.meas_cov[(old_i, old_j)];
                }
            }
            screened.steps[k].meas = meas;
            screened.steps[k].meas_cov = meas_cov;
            screened.steps[k].meas_val = meas_val;
        }
        kept_any |= !screened.steps[k].meas_val.is_empty();
    }
    if !kept_any {
        return Err(Error::AllMeasurementsRemoved);
    }
    Ok((linear::smooth(&screened)?, removed))
}

// ---------------------------------------------------------------------------
// Functional recovery with the Vapnik loss
// ---------------------------------------------------------------------------

/// Median wall-clock seconds to solve a synthetic SPD block-tridiagonal
/// system with `horizon` blocks of dimension `n`, over `repeats` runs.
/// Backs the linear-scaling benchmark.
pub fn bench_solve(n: usize, horizon: usize, repeats: usize) -> f64 {
    use crate::blocktri::{BlockTriMatrix, BlockVector};
    let diag: Vec<DMatrix<f64>> = (0..horizon)
        .map(|k| {
            let mut m = DMatrix::identity(n, n) * (4.0 + (k % 3) as f64);
            for i in 0..n {
                for j in 0..i {
                    let v = 0.1 * ((i + j + k) % 5) as f64;
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            m
        })
        .collect();
    let sub: Vec<DMatrix<f64>> = (0..horizon - 1)
        .map(|k| DMatrix::from_fn(n, n, |i, j| 0.2 * (((i + 2 * j + k) % 4) as f64 - 1.5)))
        .collect();
    let a = BlockTriMatrix::new(diag, sub).expect("valid synthetic system");
    let rhs = BlockVector::from_flat(
        n,
        DVector::from_iterator(n * horizon, (0..n * horizon).map(|i| ((i % 13) as f64) - 6.0)),
    )
    .expect("valid rhs");
    // warm up once, then take the median of the timed runs
    let _ = a.solve(&rhs).expect("spd");
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = std::time::Instant::now();
            let _ = a.solve(&rhs).expect("spd");
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(|x, y| x.partial_cmp(y).unwrap());
    times[times.len() / 2]
}

#[derive(Debug, Clone)]
pub struct VapnikCvSpec {
    /// Number of samples on the unit interval.
    pub samples: usize,
    /// Fraction of samples assigned to the training set.
    pub train_fraction: f64,
    /// Process-variance scale grid (log-spaced by the caller).
    pub lambda2_grid: Vec<f64>,
    /// Insensitivity band grid.
    pub eps_grid: Vec<f64>,
    pub noise: NoiseMixtureSpec,
    pub seed: u64,
}

impl VapnikCvSpec {
    /// Paper-scale setup: 2000 samples, 1300/700 split, 10 x 20 grid on
    /// `[0.01, 1e4] x [0, 1]`.
    pub fn full(seed: u64) -> Self {
        VapnikCvSpec {
            samples: 2000,
            train_fraction: 0.65,
            lambda2_grid: log_grid(0.01, 1e4, 10),
            eps_grid: lin_grid(0.0, 1.0, 20),
            noise: NoiseMixtureSpec { p: 0.1, base_var: 0.25, outlier_var: 25.0 },
            seed,
        }
    }

    /// Desk-scale setup: 500 samples, 5 x 10 grid.
    pub fn desk(seed: u64) -> Self {
        VapnikCvSpec {
            samples: 500,
            train_fraction: 0.65,
            lambda2_grid: log_grid(0.01, 1e4, 5),
            eps_grid: lin_grid(0.0, 1.0, 10),
            noise: NoiseMixtureSpec { p: 0.1, base_var: 0.25, outlier_var: 25.0 },
            seed,
        }
    }
}

pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && lo > 0.0 && hi > lo);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (llo + (lhi - llo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

pub fn lin_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2);
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

#[derive(Debug, Clone)]
pub struct VapnikReport {
    pub best_lambda2: f64,
    pub best_eps: f64,
    pub support_vectors: usize,
    pub train_count: usize,
    pub vapnik_validation_mse: f64,
    pub gaussian_lambda2: f64,
    pub gaussian_validation_mse: f64,
    /// `(lambda2, eps, validation mse)` over the whole grid.
    pub grid: Vec<(f64, f64, f64)>,
    /// `(t, truth, vapnik estimate, gaussian estimate, measurement)` per sample.
    pub fit: Vec<(f64, f64, f64, f64, f64)>,
}

fn vapnik_target(t: f64) -> f64 {
    (8.0 * t).sin().exp()
}

/// Integrated-Wiener model for functional recovery: the smoother estimates
/// `f - f(0)` with `f(0) = 1` known; measurements are present only at
/// training indices.
fn wiener_model(
    samples: usize,
    lambda2: f64,
    z: &[f64],
    train_mask: &[bool],
) -> Result<LinearStateSpace> {
    let dt = 1.0 / samples as f64;
    let trans = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, dt, 1.0]);
    let q = model::sde_cov(dt, lambda2);
    let steps = (0..samples)
        .map(|k| {
            let (meas, meas_cov, meas_val) = if train_mask[k] {
                (
                    DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
                    DMatrix::from_element(1, 1, 1.0),
                    DVector::from_element(1, z[k] - 1.0),
                )
            } else {
                (DMatrix::zeros(0, 2), DMatrix::zeros(0, 0), DVector::zeros(0))
            };
            model::LinearStep {
                trans: trans.clone(),
                proc_cov: q.clone(),
                meas,
                meas_cov,
                meas_val,
            }
        })
        .collect();
    Ok(LinearStateSpace { init_mean: DVector::zeros(2), steps })
}

fn validation_mse(estimate: &BlockVector, z: &[f64], mask: &[bool], train: bool) -> f64 {
    let mut acc = 0.0;
    let mut count = 0;
    for k in 0..z.len() {
        if mask[k] == train {
            let pred = estimate.block(k)[1] + 1.0;
            acc += (pred - z[k]).powi(2);
            count += 1;
        }
    }
    acc / count as f64
}

/// Grid cross-validation of the Vapnik smoother against the Gaussian one on
/// the contaminated functional-recovery problem.
pub fn run_vapnik_cv(spec: &VapnikCvSpec) -> Result<VapnikReport> {
    spec.noise.validate()?;
    if spec.samples < 10 || !(0.1..0.95).contains(&spec.train_fraction) {
        return Err(Error::InvalidParameter("degenerate sample/train configuration".into()));
    }
    let n = spec.samples;
    let dt = 1.0 / n as f64;
    let mut rng_meas = stream_rng(spec.seed, 0, 0, 1);
    let mut rng_split = stream_rng(spec.seed, 0, 0, 2);

    let ts: Vec<f64> = (0..n).map(|k| (k + 1) as f64 * dt).collect();
    let truth: Vec<f64> = ts.iter().map(|&t| vapnik_target(t)).collect();
    let z: Vec<f64> = truth.iter().map(|&f| f + spec.noise.sample(&mut rng_meas)).collect();

    // random train/validation split
    let train_count = (spec.train_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng_split.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut train_mask = vec![false; n];
    for &i in idx.iter().take(train_count) {
        train_mask[i] = true;
    }

    // penalties are evaluated on raw residuals (R = 1); lambda2 carries the
    // process/measurement scale ratio
    let mut grid = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    for &lambda2 in &spec.lambda2_grid {
        let model = wiener_model(n, lambda2, &z, &train_mask)?;
        for &eps in &spec.eps_grid {
            let sol = smooth_plq(
                &model,
                &PlqPenalty::l2(),
                &PlqPenalty::vapnik(eps)?,
                &PlqOptions::default(),
            )?;
            let err = validation_mse(&sol.x, &z, &train_mask, false);
            grid.push((lambda2, eps, err));
            if best.map(|(_, _, b)| err < b).unwrap_or(true) {
                best = Some((lambda2, eps, err));
            }
        }
    }
    let (best_lambda2, best_eps, vapnik_validation_mse) = best.expect("nonempty grid");

    // Gaussian reference: same CV over lambda2 only
    let mut gauss_best: Option<(f64, f64)> = None;
    for &lambda2 in &spec.lambda2_grid {
        let model = wiener_model(n, lambda2, &z, &train_mask)?;
        let sol = linear::smooth(&model)?;
        let err = validation_mse(&sol.x, &z, &train_mask, false);
        if gauss_best.map(|(_, b)| err < b).unwrap_or(true) {
            gauss_best = Some((lambda2, err));
        }
    }
    let (gaussian_lambda2, gaussian_validation_mse) = gauss_best.expect("nonempty grid");

    // refit at the selected points for the report
    let model = wiener_model(n, best_lambda2, &z, &train_mask)?;
    let vap_fit = smooth_plq(
        &model,
        &PlqPenalty::l2(),
        &PlqPenalty::vapnik(best_eps)?,
        &PlqOptions::default(),
    )?;
    let gauss_model = wiener_model(n, gaussian_lambda2, &z, &train_mask)?;
    let gauss_fit = linear::smooth(&gauss_model)?;

    let mut support_vectors = 0;
    for k in 0..n {
        if train_mask[k] {
            let res = (vap_fit.x.block(k)[1] + 1.0) - z[k];
            if res.abs() > best_eps - 1e-6 {
                support_vectors += 1;
            }
        }
    }

    let fit = (0..n)
        .map(|k| {
            (
                ts[k],
                truth[k],
                vap_fit.x.block(k)[1] + 1.0,
                gauss_fit.x.block(k)[1] + 1.0,
                z[k],
            )
        })
        .collect();

    Ok(VapnikReport {
        best_lambda2,
        best_eps,
        support_vectors,
        train_count,
        vapnik_validation_mse,
        gaussian_lambda2,
        gaussian_validation_mse,
        grid,
        fit,
    })
}
