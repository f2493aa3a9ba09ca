//! JSON run configuration: schema, defaults and validation.
//!
//! Unknown keys are rejected at parse time; [`validate`] performs the full
//! structural check without touching any solver and returns every violation
//! it finds.

use serde::Deserialize;

pub const SCENARIOS: &[&str] = &[
    "sine",
    "vanderpol",
    "vanderpol-robust",
    "ship",
    "robust-linear",
    "robust-vanderpol",
    "vapnik",
];

pub const METHODS: &[&str] = &[
    "linear",
    "gn",
    "l1",
    "constrained",
    "plq",
    "sparse-penalized",
    "sparse-lasso",
];

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<String>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub scale: Option<f64>,
    pub output_dir: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub sparse: SparseConfig,
    #[serde(default)]
    pub constraint: ConstraintConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub cv: CvConfig,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: Option<usize>,
    pub dt: Option<f64>,
    pub sigma2: Option<f64>,
    pub meas_var: Option<f64>,
    pub mu: Option<f64>,
    /// Damping rate of the variable-box scenario envelope.
    pub alpha: Option<f64>,
    /// Oscillation rate of the variable-box scenario signal.
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub p: f64,
    pub base_var: f64,
    pub outlier_var: f64,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// `l2 | l1 | huber | vapnik` (process side).
    pub process: Option<String>,
    /// `l2 | l1 | huber | vapnik` (measurement side).
    pub measurement: Option<String>,
    pub huber_k: Option<f64>,
    pub vapnik_eps: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SparseConfig {
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    /// State-component indices carrying unit penalty weight.
    pub weight_pattern: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Time-varying envelope bounds instead of constant ones.
    #[serde(default)]
    pub variable: bool,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub ip_max_iter: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub samples: Option<usize>,
    pub lambda2_count: Option<usize>,
    pub eps_count: Option<usize>,
    pub train_fraction: Option<f64>,
}

/// Structural validation: returns every violation, or an empty list when the
/// configuration is runnable.
pub fn validate(cfg: &RunConfig) -> Vec<String> {
    let mut errors = Vec::new();
    if let Some(s) = cfg.scenario.as_deref() {
        if !SCENARIOS.contains(&s) {
            errors.push(format!(
                "unknown scenario `{s}` (available: {})",
                SCENARIOS.join(", ")
            ));
        }
    }
    if let Some(m) = cfg.method.as_deref() {
        if !METHODS.contains(&m) {
            errors.push(format!("unknown method `{m}` (available: {})", METHODS.join(", ")));
        }
    }
    if let Some(r) = cfg.replications {
        if r == 0 {
            errors.push("replications: must be >= 1".into());
        }
    }
    if let Some(s) = cfg.scale {
        if !(s > 0.0) {
            errors.push("scale: must be > 0".into());
        }
    }
    for (name, v) in [
        ("model.dt", cfg.model.dt),
        ("model.sigma2", cfg.model.sigma2),
        ("model.meas_var", cfg.model.meas_var),
    ] {
        if let Some(v) = v {
            if !(v > 0.0) {
                errors.push(format!("{name}: must be > 0 (got {v})"));
            }
        }
    }
    if let Some(h) = cfg.model.horizon {
        if h == 0 {
            errors.push("model.horizon: must be >= 1".into());
        }
    }
    if let Some(n) = cfg.noise.as_ref() {
        if !(0.0..=1.0).contains(&n.p) {
            errors.push(format!("noise.p: must be in [0,1] (got {})", n.p));
        }
        if !(n.base_var > 0.0) {
            errors.push(format!("noise.base_var: must be > 0 (got {})", n.base_var));
        }
        if !(n.outlier_var > 0.0) {
            errors.push(format!("noise.outlier_var: must be > 0 (got {})", n.outlier_var));
        }
    }
    for (name, v) in [("penalty.process", &cfg.penalty.process), ("penalty.measurement", &cfg.penalty.measurement)]
    {
        if let Some(p) = v.as_deref() {
            if !["l2", "l1", "huber", "vapnik"].contains(&p) {
                errors.push(format!("{name}: unknown penalty `{p}` (available: l2, l1, huber, vapnik)"));
            }
        }
    }
    if let Some(k) = cfg.penalty.huber_k {
        if !(k > 0.0) {
            errors.push(format!("penalty.huber_k: must be > 0 (got {k})"));
        }
    }
    if let Some(e) = cfg.penalty.vapnik_eps {
        if e < 0.0 {
            errors.push(format!("penalty.vapnik_eps: must be >= 0 (got {e})"));
        }
    }
    if let Some(l) = cfg.sparse.lambda {
        if !(l > 0.0) {
            errors.push(format!("sparse.lambda: must be > 0 (got {l})"));
        }
    }
    if let Some(t) = cfg.sparse.tau {
        if t < 0.0 {
            errors.push(format!("sparse.tau: must be >= 0 (got {t})"));
        }
    }
    if let (Some(lo), Some(hi)) = (cfg.constraint.lower, cfg.constraint.upper) {
        if lo >= hi {
            errors.push(format!("constraint: lower {lo} must be below upper {hi}"));
        }
    }
    if let Some(f) = cfg.cv.train_fraction {
        if !(0.1..0.95).contains(&f) {
            errors.push(format!("cv.train_fraction: must be in [0.1, 0.95) (got {f})"));
        }
    }
    if let Some(s) = cfg.cv.samples {
        if s < 10 {
            errors.push(format!("cv.samples: must be >= 10 (got {s})"));
        }
    }
    errors
}
