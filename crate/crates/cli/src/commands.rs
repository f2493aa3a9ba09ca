//! Subcommand implementations: build the scenario, run the solver, write the
//! artifacts.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use smoothkit::blocktri::BlockVector;
use smoothkit::constrained::{smooth_constrained_nonlinear, solve_qp_constrained, IpOptions};
use smoothkit::experiments::{
    self, bench_solve, measurements_from_truth, run_robust_linear_table, run_robust_vdp_table,
    run_vapnik_cv, simulate, stream_rng, NoiseMixtureSpec, TableSpec, VapnikCvSpec,
};
use smoothkit::linear::{self, SmootherSolution};
use smoothkit::model::{AffineConstraints, ConstraintSet, LinearStateSpace};
use smoothkit::nonlinear::{smooth_nonlinear, GnOptions};
use smoothkit::plq::{smooth_plq, PlqOptions, PlqPenalty};
use smoothkit::robust::{smooth_l1_laplace, L1Options};
use smoothkit::sparse::{
    sparse_smooth_lasso, sparse_smooth_penalized, SparseForm, SparseOptions, SparsePenaltySpec,
};

use crate::config::RunConfig;
use crate::output::{metadata_json, render_svg, write_file, Series};
use crate::{CliError, CliResult};

fn solver_err(module: &str, err: smoothkit::Error) -> CliError {
    CliError::Solver { module: module.to_string(), message: err.to_string() }
}

fn io_err(err: std::io::Error) -> CliError {
    CliError::Io(err.to_string())
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub scale: f64,
}

impl Ctx {
    fn reps(&self, default: usize) -> usize {
        let base = self.cfg.replications.unwrap_or(default);
        ((base as f64 * self.scale).round() as usize).max(1)
    }

    fn noise(&self, default: NoiseMixtureSpec) -> NoiseMixtureSpec {
        match self.cfg.noise.as_ref() {
            Some(n) => NoiseMixtureSpec { p: n.p, base_var: n.base_var, outlier_var: n.outlier_var },
            None => default,
        }
    }

    fn gn_opts(&self) -> GnOptions {
        GnOptions {
            max_iter: self.cfg.solver.max_iter.unwrap_or(100),
            tol: self.cfg.solver.tol,
            ..Default::default()
        }
    }

    fn ip_opts(&self) -> IpOptions {
        IpOptions {
            max_iter: self.cfg.solver.ip_max_iter.unwrap_or(40),
            ..Default::default()
        }
    }
}

struct SmoothArtifacts {
    solution: SmootherSolution,
    times: Vec<f64>,
    truth: Option<BlockVector>,
    measurements: Vec<DVector<f64>>,
    /// Index of the state component to plot against time.
    plot_component: usize,
}

fn write_smooth_artifacts(ctx: &Ctx, art: &SmoothArtifacts) -> CliResult<()> {
    let n = art.solution.x.block_dim();
    let max_m = art.measurements.iter().map(|z| z.len()).max().unwrap_or(0);
    let mut csv = String::from("k,t");
    for i in 0..n {
        csv.push_str(&format!(",x_{}", i + 1));
    }
    for i in 0..max_m {
        csv.push_str(&format!(",z_{}", i + 1));
    }
    csv.push('\n');
    for k in 0..art.solution.x.len() {
        csv.push_str(&format!("{},{}", k + 1, art.times[k]));
        for i in 0..n {
            csv.push_str(&format!(",{}", art.solution.x.block(k)[i]));
        }
        for i in 0..max_m {
            match art.measurements[k].get(i) {
                Some(z) => csv.push_str(&format!(",{z}")),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    write_file(&ctx.out_dir.join("estimate.csv"), &csv).map_err(io_err)?;

    let mut diag = String::from("iter,objective,residual,step\n");
    for (i, it) in art.solution.iterations.iter().enumerate() {
        diag.push_str(&format!("{},{},{},{}\n", i, it.objective, it.residual, it.step));
    }
    diag.push_str(&format!(
        "final,{},{},\n",
        art.solution.objective, art.solution.residual_norm
    ));
    write_file(&ctx.out_dir.join("diagnostics.csv"), &diag).map_err(io_err)?;

    let c = art.plot_component;
    let mut series = Vec::new();
    if let Some(truth) = art.truth.as_ref() {
        series.push(Series {
            points: (0..truth.len()).map(|k| (art.times[k], truth.block(k)[c])).collect(),
            color: "black",
            scatter: false,
            dashed: false,
        });
    }
    series.push(Series {
        points: (0..art.solution.x.len())
            .map(|k| (art.times[k], art.solution.x.block(k)[c]))
            .collect(),
        color: "#1f77b4",
        scatter: false,
        dashed: true,
    });
    let meas_points: Vec<(f64, f64)> = art
        .measurements
        .iter()
        .enumerate()
        .filter(|(_, z)| z.len() == 1)
        .map(|(k, z)| (art.times[k], z[0]))
        .collect();
    if !meas_points.is_empty() {
        series.push(Series { points: meas_points, color: "#2ca02c", scatter: true, dashed: false });
    }
    write_file(&ctx.out_dir.join("estimate.svg"), &render_svg(&series, "estimate"))
        .map_err(io_err)?;
    write_file(&ctx.out_dir.join("metadata.json"), &metadata_json(ctx.seed, ctx.scale, None))
        .map_err(io_err)?;
    Ok(())
}

fn penalty_from_name(name: &str, cfg: &RunConfig) -> CliResult<PlqPenalty> {
    match name {
        "l2" => Ok(PlqPenalty::l2()),
        // measurement-noise reading of `l1`: the variance-matched Laplace
        // penalty, which reproduces the robust smoother
        "l1" => Ok(PlqPenalty::l1_laplace()),
        "huber" => PlqPenalty::huber(cfg.penalty.huber_k.unwrap_or(1.0))
            .map_err(|e| solver_err("plq", e)),
        "vapnik" => PlqPenalty::vapnik(cfg.penalty.vapnik_eps.unwrap_or(0.45))
            .map_err(|e| solver_err("plq", e)),
        other => Err(CliError::Config(format!("unknown penalty `{other}`"))),
    }
}

/// Box constraints on the position component of a 2-state smooth-signal
/// model; per-step bounds.
fn position_box(bounds: impl Iterator<Item = (f64, f64)>) -> AffineConstraints {
    let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]);
    let (blocks, offs): (Vec<_>, Vec<_>) = bounds
        .map(|(lo, hi)| (b.clone(), DVector::from_column_slice(&[hi, -lo])))
        .unzip();
    AffineConstraints { blocks, bounds: offs }
}

pub fn run_smooth(ctx: &Ctx) -> CliResult<()> {
    let scenario = ctx.cfg.scenario.as_deref().unwrap_or("sine");
    let method = ctx.cfg.method.as_deref().unwrap_or(match scenario {
        "vanderpol" => "gn",
        "vanderpol-robust" => "l1",
        "ship" => "constrained",
        _ => "linear",
    });

    let art = match scenario {
        "sine" | "robust-linear" => sine_family(ctx, scenario, method)?,
        "vanderpol" | "vanderpol-robust" => vanderpol_family(ctx, scenario, method)?,
        "ship" => ship_scenario(ctx, method)?,
        other => {
            return Err(CliError::Config(format!(
                "scenario `{other}` is not a single-run smoothing scenario; use `table` or `cv`"
            )))
        }
    };
    write_smooth_artifacts(ctx, &art)?;
    println!(
        "smooth: scenario={scenario} method={method} objective={} residual={} steps={}",
        art.solution.objective,
        art.solution.residual_norm,
        art.solution.x.len()
    );
    Ok(())
}

fn sine_family(ctx: &Ctx, scenario: &str, method: &str) -> CliResult<SmoothArtifacts> {
    let horizon = ctx.cfg.model.horizon.unwrap_or(100);
    let dt = ctx.cfg.model.dt.unwrap_or(4.0 * std::f64::consts::PI / horizon as f64);
    let sigma2 = ctx.cfg.model.sigma2.unwrap_or(1.0);

    // scenario data: truth + measurement noise profile
    let (sc, noise) = if scenario == "robust-linear" {
        (
            experiments::robust_linear_scenario(horizon).map_err(|e| solver_err("model", e))?,
            ctx.noise(NoiseMixtureSpec { p: 0.1, base_var: 0.25, outlier_var: 100.0 }),
        )
    } else {
        let meas_var = ctx.cfg.model.meas_var.unwrap_or(if method == "constrained" {
            1.0
        } else {
            0.35 * 0.35
        });
        let mut sc = experiments::sine_scenario(horizon, dt, sigma2, meas_var)
            .map_err(|e| solver_err("model", e))?;
        if ctx.cfg.constraint.variable {
            // variable-box signal: exp(-alpha t) sin(beta t) + 0.1 t
            let alpha = ctx.cfg.model.alpha.unwrap_or(0.25);
            let beta = ctx.cfg.model.beta.unwrap_or(2.0);
            for k in 0..horizon {
                let t = (k + 1) as f64 * dt;
                let val = (-alpha * t).exp() * (beta * t).sin() + 0.1 * t;
                let deriv = (-alpha * t).exp()
                    * (beta * (beta * t).cos() - alpha * (beta * t).sin())
                    + 0.1;
                sc.truth.set_block(k, &DVector::from_column_slice(&[deriv, val]));
            }
            sc.model.init_mean = sc.truth.block_owned(0);
        }
        (sc, ctx.noise(NoiseMixtureSpec::gaussian(ctx.cfg.model.meas_var.unwrap_or(0.35 * 0.35))))
    };

    let mut rng = stream_rng(ctx.seed, 0, 0, 1);
    let z = measurements_from_truth(&sc, &noise, &mut rng);
    let model = sc.model.clone().with_measurements(z.clone()).map_err(|e| solver_err("model", e))?;
    let times: Vec<f64> = (0..horizon).map(|k| (k + 1) as f64 * dt).collect();

    let solution = match method {
        "linear" => linear::smooth(&model).map_err(|e| solver_err("linear", e))?,
        "gn" => {
            let (sol, _) = smooth_nonlinear(&model.as_nonlinear(), None, &ctx.gn_opts())
                .map_err(|e| solver_err("nonlinear", e))?;
            sol
        }
        "l1" => {
            let (sol, _) = smooth_l1_laplace(
                &model.as_nonlinear(),
                None,
                &ctx.gn_opts(),
                &L1Options::default(),
            )
            .map_err(|e| solver_err("robust", e))?;
            sol
        }
        "constrained" => {
            let sys = linear::assemble(&model).map_err(|e| solver_err("linear", e))?;
            let cons = if ctx.cfg.constraint.variable {
                let alpha = ctx.cfg.model.alpha.unwrap_or(0.25);
                position_box((0..horizon).map(|k| {
                    let t = (k + 1) as f64 * dt;
                    let env = (-alpha * t).exp();
                    (-env + 0.1 * t, env + 0.1 * t)
                }))
            } else {
                let lo = ctx.cfg.constraint.lower.unwrap_or(-1.0);
                let hi = ctx.cfg.constraint.upper.unwrap_or(1.0);
                position_box((0..horizon).map(|_| (lo, hi)))
            };
            let (sol, _) = solve_qp_constrained(&sys, &cons, &ctx.ip_opts())
                .map_err(|e| solver_err("constrained", e))?;
            sol
        }
        "plq" => {
            let wp = penalty_from_name(ctx.cfg.penalty.process.as_deref().unwrap_or("l2"), &ctx.cfg)?;
            let vp = penalty_from_name(
                ctx.cfg.penalty.measurement.as_deref().unwrap_or("huber"),
                &ctx.cfg,
            )?;
            smooth_plq(&model, &wp, &vp, &PlqOptions::default())
                .map_err(|e| solver_err("plq", e))?
        }
        "sparse-penalized" | "sparse-lasso" => {
            let sys = linear::assemble(&model).map_err(|e| solver_err("linear", e))?;
            let pattern = ctx.cfg.sparse.weight_pattern.clone().unwrap_or_else(|| vec![0]);
            let mut weights = DVector::zeros(2 * horizon);
            for k in 0..horizon {
                for &c in &pattern {
                    if c < 2 {
                        weights[2 * k + c] = 1.0;
                    }
                }
            }
            if method == "sparse-penalized" {
                let spec = SparsePenaltySpec {
                    weights,
                    form: SparseForm::Penalized { lambda: ctx.cfg.sparse.lambda.unwrap_or(0.5) },
                };
                sparse_smooth_penalized(&sys, &spec, &SparseOptions::default())
                    .map_err(|e| solver_err("sparse", e))?
            } else {
                let spec = SparsePenaltySpec {
                    weights,
                    form: SparseForm::Constrained { tau: ctx.cfg.sparse.tau.unwrap_or(5.0) },
                };
                sparse_smooth_lasso(&sys, &spec, &SparseOptions::default())
                    .map_err(|e| solver_err("sparse", e))?
            }
        }
        other => {
            return Err(CliError::Config(format!(
                "method `{other}` is not available for scenario `{scenario}`"
            )))
        }
    };

    Ok(SmoothArtifacts {
        solution,
        times,
        truth: Some(sc.truth),
        measurements: z,
        plot_component: 1,
    })
}

fn vanderpol_family(ctx: &Ctx, scenario: &str, method: &str) -> CliResult<SmoothArtifacts> {
    let robust = scenario == "vanderpol-robust";
    let base = experiments::vanderpol_scenario(robust).map_err(|e| solver_err("model", e))?;
    let truth_cov = experiments::vanderpol_truth_cov(&base);
    let noise = if robust {
        ctx.noise(NoiseMixtureSpec { p: 0.2, base_var: 1.0, outlier_var: 100.0 })
    } else {
        ctx.noise(NoiseMixtureSpec::gaussian(1.0))
    };
    let mut rng_proc = stream_rng(ctx.seed, 0, 0, 0);
    let mut rng_meas = stream_rng(ctx.seed, 0, 0, 1);
    let (truth, z) = simulate(&base, &truth_cov, &noise, &mut rng_proc, &mut rng_meas)
        .map_err(|e| solver_err("experiments", e))?;
    let model = base.with_measurements(z.clone()).map_err(|e| solver_err("model", e))?;

    let solution = match method {
        "gn" => {
            let (sol, _) = smooth_nonlinear(&model, None, &ctx.gn_opts())
                .map_err(|e| solver_err("nonlinear", e))?;
            sol
        }
        "l1" => {
            let (sol, _) =
                smooth_l1_laplace(&model, None, &ctx.gn_opts(), &L1Options::default())
                    .map_err(|e| solver_err("robust", e))?;
            sol
        }
        other => {
            return Err(CliError::Config(format!(
                "method `{other}` is not available for the oscillator scenarios (use gn or l1)"
            )))
        }
    };
    let dt = if robust { 16.0 / 164.0 } else { 30.0 / 80.0 };
    let times = (0..model.horizon()).map(|k| (k + 1) as f64 * dt).collect();
    Ok(SmoothArtifacts { solution, times, truth: Some(truth), measurements: z, plot_component: 0 })
}

fn ship_scenario(ctx: &Ctx, method: &str) -> CliResult<SmoothArtifacts> {
    if method != "constrained" {
        return Err(CliError::Config(format!(
            "method `{method}` is not available for the ship scenario (use constrained)"
        )));
    }
    let horizon = ctx.cfg.model.horizon.unwrap_or(50);
    let dt = ctx.cfg.model.dt.unwrap_or(2.0 * std::f64::consts::PI / horizon as f64);
    // default measurement variance documented as a repo choice
    let meas_var = ctx.cfg.model.meas_var.unwrap_or(0.05);
    let (model, constraints) = smoothkit::model::ship_model(horizon, dt, meas_var)
        .map_err(|e| solver_err("model", e))?;

    let mut truth = BlockVector::zeros(4, horizon);
    for k in 0..horizon {
        truth.set_block(k, &smoothkit::model::ship_truth((k + 1) as f64 * dt));
    }
    let mut rng = stream_rng(ctx.seed, 0, 0, 1);
    let noise = NoiseMixtureSpec::gaussian(meas_var);
    let z: Vec<DVector<f64>> = (0..horizon)
        .map(|k| {
            let mut v = model.measurement.eval(k + 1, &truth.block_owned(k));
            for i in 0..v.len() {
                v[i] += noise.sample(&mut rng);
            }
            v
        })
        .collect();
    let model = model.with_measurements(z.clone()).map_err(|e| solver_err("model", e))?;

    // infeasible constant start
    let mut x0 = BlockVector::zeros(4, horizon);
    for k in 0..horizon {
        x0.set_block(k, &DVector::from_column_slice(&[0.0, 0.0, 0.0, 1.0]));
    }
    let solution = smooth_constrained_nonlinear(
        &model,
        &constraints,
        Some(x0),
        &ctx.gn_opts(),
        &ctx.ip_opts(),
    )
    .map_err(|e| solver_err("constrained", e))?;
    let times = (0..horizon).map(|k| (k + 1) as f64 * dt).collect();
    Ok(SmoothArtifacts { solution, times, truth: Some(truth), measurements: z, plot_component: 3 })
}

pub fn run_table(ctx: &Ctx) -> CliResult<()> {
    let scenario = ctx.cfg.scenario.as_deref().unwrap_or("robust-linear");
    let reps = ctx.reps(100);
    let report = match scenario {
        "robust-linear" => run_robust_linear_table(&TableSpec::robust_linear(reps, ctx.seed))
            .map_err(|e| solver_err("experiments", e))?,
        "robust-vanderpol" => run_robust_vdp_table(&TableSpec::robust_vanderpol(reps, ctx.seed))
            .map_err(|e| solver_err("experiments", e))?,
        other => {
            return Err(CliError::Config(format!(
                "unknown table scenario `{other}` (available: robust-linear, robust-vanderpol)"
            )))
        }
    };
    write_file(&ctx.out_dir.join("replications.csv"), &report.render_replications_csv())
        .map_err(io_err)?;
    write_file(&ctx.out_dir.join("summary.csv"), &report.render_summary_csv()).map_err(io_err)?;
    write_file(
        &ctx.out_dir.join("metadata.json"),
        &metadata_json(ctx.seed, ctx.scale, Some(reps)),
    )
    .map_err(io_err)?;
    println!("table: scenario={scenario} replications={reps}");
    for cell in &report.cells {
        let phi = cell.phi.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let cols: Vec<String> = cell
            .methods
            .iter()
            .map(|m| format!("{}={:.4} ({:.4}, {:.4})", m.method, m.median, m.lo95, m.hi95))
            .collect();
        println!("  p={:<4} phi={:<6} {}", cell.p, phi, cols.join("  "));
    }
    Ok(())
}

pub fn run_cv(ctx: &Ctx) -> CliResult<()> {
    let mut spec = VapnikCvSpec::desk(ctx.seed);
    if let Some(s) = ctx.cfg.cv.samples {
        spec.samples = s;
    }
    spec.samples = ((spec.samples as f64 * ctx.scale).round() as usize).max(10);
    if let Some(c) = ctx.cfg.cv.lambda2_count {
        spec.lambda2_grid = experiments::log_grid(0.01, 1e4, c.max(2));
    }
    if let Some(c) = ctx.cfg.cv.eps_count {
        spec.eps_grid = experiments::lin_grid(0.0, 1.0, c.max(2));
    }
    if let Some(f) = ctx.cfg.cv.train_fraction {
        spec.train_fraction = f;
    }
    if let Some(n) = ctx.cfg.noise.as_ref() {
        spec.noise = NoiseMixtureSpec { p: n.p, base_var: n.base_var, outlier_var: n.outlier_var };
    }

    let report = run_vapnik_cv(&spec).map_err(|e| solver_err("experiments", e))?;

    let mut grid = String::from("lambda2,eps,validation_mse\n");
    for (l, e, v) in &report.grid {
        grid.push_str(&format!("{l},{e},{v}\n"));
    }
    write_file(&ctx.out_dir.join("grid.csv"), &grid).map_err(io_err)?;

    let mut fit = String::from("t,truth,vapnik,gaussian,z\n");
    for (t, tr, vp, ga, z) in &report.fit {
        fit.push_str(&format!("{t},{tr},{vp},{ga},{z}\n"));
    }
    write_file(&ctx.out_dir.join("fit.csv"), &fit).map_err(io_err)?;

    let series = vec![
        Series {
            points: report.fit.iter().map(|&(t, tr, _, _, _)| (t, tr)).collect(),
            color: "black",
            scatter: false,
            dashed: false,
        },
        Series {
            points: report.fit.iter().map(|&(t, _, vp, _, _)| (t, vp)).collect(),
            color: "#1f77b4",
            scatter: false,
            dashed: true,
        },
        Series {
            points: report.fit.iter().map(|&(t, _, _, ga, _)| (t, ga)).collect(),
            color: "#d62728",
            scatter: false,
            dashed: true,
        },
    ];
    write_file(&ctx.out_dir.join("fit.svg"), &render_svg(&series, "functional recovery"))
        .map_err(io_err)?;
    write_file(&ctx.out_dir.join("metadata.json"), &metadata_json(ctx.seed, ctx.scale, None))
        .map_err(io_err)?;

    println!(
        "cv: lambda2={:.4e} eps={:.3} support_vectors={}/{} vapnik_mse={:.4} gaussian_mse={:.4}",
        report.best_lambda2,
        report.best_eps,
        report.support_vectors,
        report.train_count,
        report.vapnik_validation_mse,
        report.gaussian_validation_mse
    );
    Ok(())
}

pub fn run_bench(ctx: &Ctx) -> CliResult<()> {
    let n = 3;
    let repeats = 11;
    let configs = [1000usize, 2000, 4000];
    let mut csv = String::from("horizon,median_seconds\n");
    let mut timings = Vec::new();
    for &horizon in &configs {
        let t = bench_solve(n, horizon, repeats);
        timings.push((horizon, t));
        csv.push_str(&format!("{horizon},{t}\n"));
    }
    write_file(&ctx.out_dir.join("bench.csv"), &csv).map_err(io_err)?;
    let t1000 = timings[0].1;
    let t4000 = timings[2].1;
    println!("bench: n={n} repeats={repeats}");
    for (h, t) in &timings {
        println!("  N={h:<6} median={:.6}s", t);
    }
    println!("  ratio N=4000 / N=1000: {:.2}", t4000 / t1000);
    Ok(())
}

/// Check that every artifact directory is writable up front.
pub fn ensure_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(io_err)
}
