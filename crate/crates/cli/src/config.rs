//! Experiment configuration files (TOML).
//!
//! ```toml
//! name = "sigma-constant"
//! description = "..."
//!
//! [model]
//! horizon = 1.0
//! sigma_mode = "derived"            # or "independent" (then `sigma` is required)
//! kernel = { name = "constant", value = 0.02 }
//!
//! [experiment]
//! target = "sigma-line"             # sigma-line | sigma-point | k-point
//! eps = [0.2, 0.1, 0.05]
//!
//! [output]
//! dir = "out/sigma-constant"
//!
//! [expect]                          # optional regression value
//! value = 0.14445
//! tolerance = 1e-6
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use ktlab_core::fields::{validate_admissible, FieldSpec, KernelField, ModelConfig, SigmaField};
use ktlab_core::geometry::UnitVelocity;
use ktlab_core::probe::{ProbeBumps, DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_PLATEAU_FRACTION};
use ktlab_core::reconstruction::{InnerRatio, LadderSpec, Target};
use ktlab_core::solver::QuadratureSpec;
use ktlab_core::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    Derived,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub horizon: f64,
    #[serde(default = "default_sigma_mode")]
    pub sigma_mode: SigmaMode,
    pub kernel: FieldSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<FieldSpec>,
}

/// `"eps"` (inner scales `eps^2`) or a fixed ratio in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InnerRatioSetting {
    Fixed(f64),
    Named(InnerRatioName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerRatioName {
    Eps,
}

impl InnerRatioSetting {
    pub fn to_core(self) -> InnerRatio {
        match self {
            InnerRatioSetting::Fixed(r) => InnerRatio::Fixed(r),
            InnerRatioSetting::Named(InnerRatioName::Eps) => InnerRatio::Eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub target: Target,
    pub eps: Vec<f64>,
    #[serde(default = "default_inner_ratio")]
    pub inner_ratio: InnerRatioSetting,
    #[serde(default)]
    pub x_i: [f64; 3],
    #[serde(default = "default_v_i")]
    pub v_i: [f64; 3],
    #[serde(default = "default_t_m")]
    pub t_m: f64,
    #[serde(default = "default_v_hat")]
    pub v_hat: [f64; 3],
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub richardson: bool,
    /// Particle-oracle count per measurement (derived mode only); 0 disables.
    #[serde(default)]
    pub particles: usize,
    #[serde(default = "default_plateau")]
    pub plateau_fraction: f64,
    /// Refinement level of every quadrature order (powers of two).
    #[serde(default)]
    pub refine: i32,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    /// Dump the finest rung's particle trajectories to `trajectories.bin`.
    #[serde(default)]
    pub trajectories: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_out_dir(), trajectories: false }
    }
}

/// Frozen regression value for the finest rung's recovered value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectSection {
    pub value: f64,
    /// Absolute tolerance.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: ModelSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<ExpectSection>,
}

fn default_sigma_mode() -> SigmaMode {
    SigmaMode::Derived
}
fn default_inner_ratio() -> InnerRatioSetting {
    InnerRatioSetting::Named(InnerRatioName::Eps)
}
fn default_v_i() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}
fn default_v_hat() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}
fn default_t_m() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_depth() -> usize {
    3
}
fn default_seed() -> u64 {
    1
}
fn default_fd_step() -> f64 {
    0.05
}
fn default_plateau() -> f64 {
    DEFAULT_PLATEAU_FRACTION
}
fn default_mc_samples() -> usize {
    QuadratureSpec::default().mc_samples
}
fn default_out_dir() -> String {
    "ktlab-out".to_string()
}

/// One problem found in a config, with the offending key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigViolation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("{} config violation(s):\n{}", .0.len(), .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigViolation>),
}

impl ConfigError {
    pub fn violations(&self) -> &[ConfigViolation] {
        match self {
            ConfigError::Invalid(v) => v,
            ConfigError::Syntax { .. } => &[],
        }
    }
}

const TOP_KEYS: &[&str] = &["name", "description", "model", "experiment", "output", "expect"];
const MODEL_KEYS: &[&str] = &["horizon", "sigma_mode", "kernel", "sigma"];
const EXPERIMENT_KEYS: &[&str] = &[
    "target",
    "eps",
    "inner_ratio",
    "x_i",
    "v_i",
    "t_m",
    "v_hat",
    "lambda",
    "alpha",
    "depth",
    "seed",
    "fd_step",
    "richardson",
    "particles",
    "plateau_fraction",
    "refine",
    "mc_samples",
];
const OUTPUT_KEYS: &[&str] = &["dir", "trajectories"];
const EXPECT_KEYS: &[&str] = &["value", "tolerance"];

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

fn unknown_keys(table: &toml::Table, prefix: &str, known: &[&str], out: &mut Vec<ConfigViolation>) {
    for key in table.keys() {
        if !known.contains(&key.as_str()) {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            out.push(ConfigViolation { path, message: format!("unknown key (expected one of: {})", known.join(", ")) });
        }
    }
}

/// Parses and validates a config, reporting every violation found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ConfigError::Syntax { line, column, message: e.message().to_string() }
    })?;
    let mut violations = Vec::new();
    unknown_keys(&table, "", TOP_KEYS, &mut violations);
    for (section, known) in [("model", MODEL_KEYS), ("experiment", EXPERIMENT_KEYS), ("output", OUTPUT_KEYS), ("expect", EXPECT_KEYS)] {
        match table.get(section) {
            Some(toml::Value::Table(t)) => unknown_keys(t, section, known, &mut violations),
            Some(_) => violations.push(ConfigViolation { path: section.into(), message: "must be a table".into() }),
            None => {}
        }
    }
    if !violations.is_empty() {
        return Err(ConfigError::Invalid(violations));
    }
    let config: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        ConfigError::Invalid(vec![ConfigViolation { path: "config".into(), message: e.message().trim().to_string() }])
    })?;
    let violations = config.violations();
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

/// TOML text of a config; parses back to an equal structure.
pub fn to_toml(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("config is serializable")
}

fn unit(v: [f64; 3]) -> Option<UnitVelocity> {
    UnitVelocity::new(Vec3(v)).ok()
}

impl ExperimentConfig {
    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let m = &self.model;
        let kernel = KernelField::builtin(&m.kernel)?;
        Ok(match (m.sigma_mode, &m.sigma) {
            (SigmaMode::Independent, Some(s)) => ModelConfig::independent(kernel, SigmaField::builtin(s)?, m.horizon),
            (SigmaMode::Independent, None) => anyhow::bail!("model.sigma is required when sigma_mode = \"independent\""),
            (SigmaMode::Derived, _) => ModelConfig::derived(kernel, m.horizon),
        })
    }

    pub fn quadrature(&self) -> QuadratureSpec {
        QuadratureSpec { mc_samples: self.experiment.mc_samples, ..QuadratureSpec::default().refined(self.experiment.refine) }
    }

    pub fn ladder_spec(&self) -> anyhow::Result<LadderSpec> {
        let e = &self.experiment;
        let v_i = unit(e.v_i).ok_or_else(|| anyhow::anyhow!("experiment.v_i must be nonzero"))?;
        let v_hat = unit(e.v_hat).ok_or_else(|| anyhow::anyhow!("experiment.v_hat must be nonzero"))?;
        Ok(LadderSpec {
            target: e.target,
            eps: e.eps.clone(),
            inner_ratio: e.inner_ratio.to_core(),
            x_i: Vec3(e.x_i),
            v_i,
            t_m: e.t_m,
            v_hat,
            lambda: e.lambda,
            alpha: e.alpha,
            depth: e.depth,
            quadrature: self.quadrature(),
            seed: e.seed,
            fd_step: e.fd_step,
            richardson: e.richardson,
            particles: e.particles,
            bumps: ProbeBumps::with_plateau(e.plateau_fraction)?,
        })
    }

    /// Every semantic problem, checked before any compute.
    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        let mut bad = |path: &str, message: String| out.push(ConfigViolation { path: path.to_string(), message });
        let m = &self.model;
        let e = &self.experiment;

        if self.name.trim().is_empty() {
            bad("name", "must not be empty".into());
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            bad("model.horizon", format!("must be positive, got {}", m.horizon));
        }
        for (k, msg) in m.kernel.violations() {
            bad(&format!("model.kernel.{k}"), msg);
        }
        match (m.sigma_mode, &m.sigma) {
            (SigmaMode::Derived, Some(_)) => bad("model.sigma", "must be omitted when sigma_mode = \"derived\"".into()),
            (SigmaMode::Independent, None) => bad("model.sigma", "is required when sigma_mode = \"independent\"".into()),
            (SigmaMode::Independent, Some(s)) => {
                if matches!(s, FieldSpec::Anisotropic { .. } | FieldSpec::Directed { .. }) {
                    bad("model.sigma.name", format!("`{}` is a kernel field, not a damping field", s.name()));
                }
                for (k, msg) in s.violations() {
                    bad(&format!("model.sigma.{k}"), msg);
                }
            }
            (SigmaMode::Derived, None) => {}
        }

        if e.eps.is_empty() {
            bad("experiment.eps", "must list at least one value".into());
        }
        if e.eps.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            bad("experiment.eps", "values must lie in (0, 1)".into());
        }
        if e.eps.windows(2).any(|w| w[1] >= w[0]) {
            bad("experiment.eps", "must be strictly decreasing".into());
        }
        if let InnerRatioSetting::Fixed(r) = e.inner_ratio {
            if !(r > 0.0 && r < 1.0) {
                bad("experiment.inner_ratio", format!("must lie in (0, 1) or be \"eps\", got {r}"));
            }
        }
        if !(e.alpha > 0.75 && e.alpha < 1.0) {
            bad("experiment.alpha", format!("must lie in the open interval (3/4, 1), got {}", e.alpha));
        }
        if !(e.lambda > 0.0 && e.lambda < 1.0) {
            bad("experiment.lambda", format!("must lie in (0, 1), got {}", e.lambda));
        }
        if !(1..=8).contains(&e.depth) {
            bad("experiment.depth", format!("must lie in 1..=8, got {}", e.depth));
        }
        if !(e.fd_step > 0.0 && e.fd_step < 1.0) {
            bad("experiment.fd_step", format!("must lie in (0, 1), got {}", e.fd_step));
        }
        if !(0.0 < e.plateau_fraction && e.plateau_fraction < 1.0) || ProbeBumps::with_plateau(e.plateau_fraction).is_err() {
            bad("experiment.plateau_fraction", format!("{} does not give unit-mass bumps with support radius <= 1", e.plateau_fraction));
        }
        if !(-3..=3).contains(&e.refine) {
            bad("experiment.refine", format!("must lie in -3..=3, got {}", e.refine));
        }
        if e.mc_samples < 100 {
            bad("experiment.mc_samples", format!("must be >= 100, got {}", e.mc_samples));
        }
        if unit(e.v_i).is_none() {
            bad("experiment.v_i", "must be a nonzero finite vector".into());
        }
        if unit(e.v_hat).is_none() {
            bad("experiment.v_hat", "must be a nonzero finite vector".into());
        }
        if e.target.is_sigma() {
            if !(e.t_m > 0.0 && e.t_m <= m.horizon) {
                bad("experiment.t_m", format!("must lie in (0, T = {}], got {}", m.horizon, e.t_m));
            }
            if e.target == Target::SigmaPoint && e.t_m * (1.0 + e.fd_step) > m.horizon {
                bad("experiment.fd_step", format!("stencil point t_m (1 + fd_step) = {} exceeds T", e.t_m * (1.0 + e.fd_step)));
            }
        } else if let (Some(a), Some(b)) = (unit(e.v_i), unit(e.v_hat)) {
            if a.angle_to(b) < 0.1 {
                bad("experiment.v_hat", "must differ from v_i by at least 0.1 rad".into());
            }
        }
        if e.particles > 0 && m.sigma_mode != SigmaMode::Derived {
            bad("experiment.particles", "the particle oracle needs sigma_mode = \"derived\"".into());
        }
        if self.output.trajectories && e.particles == 0 {
            bad("output.trajectories", "needs experiment.particles > 0".into());
        }
        if let Some(x) = &self.expect {
            if !(x.tolerance >= 0.0 && x.value.is_finite()) {
                bad("expect", "value must be finite and tolerance >= 0".into());
            }
        }
        if e.target == Target::KPoint && m.kernel.violations().is_empty() && m.horizon > 0.0 {
            if let Ok(k) = KernelField::builtin(&m.kernel) {
                let p = k.bound() * 4.0 * std::f64::consts::PI * m.horizon;
                if p >= 1.0 {
                    bad(
                        "model.kernel",
                        format!("K-experiments need C_K*4pi*T < 1, but C_K*4pi*T = {p:.3} ({p:.6}); reduce the kernel or T"),
                    );
                }
            }
        }
        if !out.is_empty() {
            return out;
        }

        // cross-field checks that need the built model and probes
        let model = match self.model_config() {
            Ok(m) => m,
            Err(err) => {
                out.push(ConfigViolation { path: "model".into(), message: err.to_string() });
                return out;
            }
        };
        let report = validate_admissible(&model);
        for v in report.violations.iter().take(3) {
            out.push(ConfigViolation {
                path: "model".into(),
                message: format!("{} violated at x = {:?} (value {})", v.check, v.x, v.value),
            });
        }
        match self.ladder_spec() {
            Ok(spec) => {
                for &eps in &spec.eps {
                    match spec.rung_probes(eps) {
                        Err(err) => out.push(ConfigViolation {
                            path: "experiment.eps".into(),
                            message: format!("rung eps = {eps}: {err}"),
                        }),
                        Ok(probes) => {
                            for (label, probe) in probes {
                                let (lo, hi) = probe.window().time_range();
                                if lo <= 0.0 || hi > m.horizon {
                                    out.push(ConfigViolation {
                                        path: "experiment.eps".into(),
                                        message: format!(
                                            "rung eps = {eps} ({label}): time window [{lo:.4e}, {hi:.4e}] leaves (0, T]"
                                        ),
                                    });
                                }
                            }
                        }
                    }
                }
            }
            Err(err) => out.push(ConfigViolation { path: "experiment".into(), message: err.to_string() }),
        }
        out
    }
}
