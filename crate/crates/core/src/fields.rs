//! Tumbling kernel `K(x, v, v')` and damping `sigma(x, v)`, the builtin
//! catalog, admissibility checks and line integrals of `sigma`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sphere_quadrature, SphereRule, UnitVelocity, SPHERE_AREA};
use crate::quadrature::integrate_adaptive;
use crate::rng::{stream, uniform_direction};
use crate::vec3::Vec3;

pub type KernelFn = dyn Fn(Vec3, Vec3, Vec3) -> f64 + Send + Sync;
pub type SigmaFn = dyn Fn(Vec3, Vec3) -> f64 + Send + Sync;

/// Catalog entry, tagged by `name` in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    Constant {
        value: f64,
    },
    /// `value * (1 + amplitude * sin(<wavevector, x>))`
    SmoothSpace {
        value: f64,
        amplitude: f64,
        wavevector: [f64; 3],
    },
    /// `value * (1 + beta * <v, v'>)`
    Anisotropic {
        value: f64,
        beta: f64,
    },
    /// `value * (1 + beta * <v, axis>)`, asymmetric in `(v, v')`.
    Directed {
        value: f64,
        beta: f64,
        axis: [f64; 3],
    },
}

pub const KERNEL_CATALOG: &[(&str, &str)] = &[
    ("zero", "K = 0"),
    ("constant", "K = value"),
    ("smooth-space", "K = value (1 + amplitude sin<wavevector, x>)"),
    ("anisotropic", "K = value (1 + beta <v, v'>), |beta| <= 1"),
    ("directed", "K = value (1 + beta <v, axis>), |beta| <= 1"),
];

pub const SIGMA_CATALOG: &[(&str, &str)] = &[
    ("zero", "sigma = 0"),
    ("constant", "sigma = value"),
    ("smooth-space", "sigma = value (1 + amplitude sin<wavevector, x>)"),
];

fn catalog_names(cat: &[(&str, &str)]) -> String {
    cat.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
}

/// Fails with a catalog error if `name` is not a kernel catalog entry.
pub fn check_kernel_name(name: &str) -> Result<()> {
    if KERNEL_CATALOG.iter().any(|(n, _)| *n == name) {
        Ok(())
    } else {
        Err(Error::Catalog {
            name: name.to_string(),
            valid: catalog_names(KERNEL_CATALOG),
        })
    }
}

pub fn check_sigma_name(name: &str) -> Result<()> {
    if SIGMA_CATALOG.iter().any(|(n, _)| *n == name) {
        Ok(())
    } else {
        Err(Error::Catalog {
            name: name.to_string(),
            valid: catalog_names(SIGMA_CATALOG),
        })
    }
}

impl FieldSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FieldSpec::Zero => "zero",
            FieldSpec::Constant { .. } => "constant",
            FieldSpec::SmoothSpace { .. } => "smooth-space",
            FieldSpec::Anisotropic { .. } => "anisotropic",
            FieldSpec::Directed { .. } => "directed",
        }
    }

    /// Parameter problems as `(key, message)` pairs.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut need = |ok: bool, key: &str, msg: &str| {
            if !ok {
                out.push((key.to_string(), msg.to_string()));
            }
        };
        match self {
            FieldSpec::Zero => {}
            FieldSpec::Constant { value } => need(value.is_finite() && *value >= 0.0, "value", "must be finite and >= 0"),
            FieldSpec::SmoothSpace {
                value,
                amplitude,
                wavevector,
            } => {
                need(value.is_finite() && *value >= 0.0, "value", "must be finite and >= 0");
                need(amplitude.abs() <= 1.0, "amplitude", "must satisfy |amplitude| <= 1");
                need(wavevector.iter().all(|c| c.is_finite()), "wavevector", "must be finite");
            }
            FieldSpec::Anisotropic { value, beta } => {
                need(value.is_finite() && *value >= 0.0, "value", "must be finite and >= 0");
                need(beta.abs() <= 1.0, "beta", "must satisfy |beta| <= 1");
            }
            FieldSpec::Directed { value, beta, axis } => {
                need(value.is_finite() && *value >= 0.0, "value", "must be finite and >= 0");
                need(beta.abs() <= 1.0, "beta", "must satisfy |beta| <= 1");
                need(Vec3(*axis).normalized().is_some(), "axis", "must be a nonzero vector");
            }
        }
        out
    }

    fn validated(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some((k, m)) => Err(Error::config(format!("{} field: `{k}` {m}", self.name()))),
        }
    }
}

#[derive(Clone)]
pub struct KernelField {
    eval: Arc<KernelFn>,
    bound: f64,
    lipschitz: f64,
    constant: Option<f64>,
    closed_sigma: Option<FieldSpec>,
    label: String,
}

impl fmt::Debug for KernelField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelField")
            .field("label", &self.label)
            .field("bound", &self.bound)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl KernelField {
    /// Black-box kernel with declared bound `C_K` and Lipschitz modulus.
    pub fn from_fn(
        label: impl Into<String>,
        bound: f64,
        lipschitz: f64,
        f: impl Fn(Vec3, Vec3, Vec3) -> f64 + Send + Sync + 'static,
    ) -> Self {
        KernelField {
            eval: Arc::new(f),
            bound,
            lipschitz,
            constant: None,
            closed_sigma: None,
            label: label.into(),
        }
    }

    pub fn builtin(spec: &FieldSpec) -> Result<Self> {
        spec.validated()?;
        let label = format!("{spec:?}");
        let k = match *spec {
            FieldSpec::Zero => KernelField {
                constant: Some(0.0),
                closed_sigma: Some(FieldSpec::Zero),
                ..KernelField::from_fn(label, 0.0, 0.0, |_, _, _| 0.0)
            },
            FieldSpec::Constant { value } => KernelField {
                constant: Some(value),
                closed_sigma: Some(FieldSpec::Constant {
                    value: SPHERE_AREA * value,
                }),
                ..KernelField::from_fn(label, value, 0.0, move |_, _, _| value)
            },
            FieldSpec::SmoothSpace {
                value,
                amplitude,
                wavevector,
            } => {
                let kv = Vec3(wavevector);
                KernelField {
                    closed_sigma: Some(FieldSpec::SmoothSpace {
                        value: SPHERE_AREA * value,
                        amplitude,
                        wavevector,
                    }),
                    ..KernelField::from_fn(
                        label,
                        value * (1.0 + amplitude.abs()),
                        value * amplitude.abs() * kv.norm(),
                        move |x, _, _| value * (1.0 + amplitude * kv.dot(x).sin()),
                    )
                }
            }
            FieldSpec::Anisotropic { value, beta } => KernelField {
                closed_sigma: Some(FieldSpec::Constant {
                    value: SPHERE_AREA * value,
                }),
                ..KernelField::from_fn(label, value * (1.0 + beta.abs()), value * beta.abs(), move |_, v, w| {
                    value * (1.0 + beta * v.dot(w))
                })
            },
            FieldSpec::Directed { value, beta, axis } => {
                let a = Vec3(axis).normalized().expect("validated");
                KernelField {
                    closed_sigma: Some(FieldSpec::Constant {
                        value: SPHERE_AREA * value,
                    }),
                    ..KernelField::from_fn(label, value * (1.0 + beta.abs()), value * beta.abs(), move |_, v, _| {
                        value * (1.0 + beta * v.dot(a))
                    })
                }
            }
        };
        Ok(k)
    }

    /// Pointwise sum; bounds and moduli add.
    pub fn sum(a: &KernelField, b: &KernelField) -> KernelField {
        let (fa, fb) = (a.eval.clone(), b.eval.clone());
        KernelField {
            constant: match (a.constant, b.constant) {
                (Some(p), Some(q)) => Some(p + q),
                _ => None,
            },
            ..KernelField::from_fn(
                format!("({}) + ({})", a.label, b.label),
                a.bound + b.bound,
                a.lipschitz + b.lipschitz,
                move |x, v, w| fa(x, v, w) + fb(x, v, w),
            )
        }
    }

    /// `K(x, v, v')`: rate of switching from `v'` to `v` at `x`.
    #[inline]
    pub fn eval(&self, x: Vec3, v: Vec3, v_prev: Vec3) -> f64 {
        (self.eval)(x, v, v_prev)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn constant_value(&self) -> Option<f64> {
        self.constant
    }

    pub fn is_zero(&self) -> bool {
        self.constant == Some(0.0)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaProvenance {
    Independent,
    DerivedFromKernel,
}

#[derive(Clone)]
pub struct SigmaField {
    eval: Arc<SigmaFn>,
    bound: f64,
    lipschitz: f64,
    constant: Option<f64>,
    /// `(value, amplitude, wavevector)` of a smooth-space field.
    wave: Option<(f64, f64, Vec3)>,
    provenance: SigmaProvenance,
    label: String,
}

impl fmt::Debug for SigmaField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigmaField")
            .field("label", &self.label)
            .field("bound", &self.bound)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl SigmaField {
    pub fn from_fn(
        label: impl Into<String>,
        bound: f64,
        lipschitz: f64,
        f: impl Fn(Vec3, Vec3) -> f64 + Send + Sync + 'static,
    ) -> Self {
        SigmaField {
            eval: Arc::new(f),
            bound,
            lipschitz,
            constant: None,
            wave: None,
            provenance: SigmaProvenance::Independent,
            label: label.into(),
        }
    }

    pub fn builtin(spec: &FieldSpec) -> Result<Self> {
        check_sigma_name(spec.name())?;
        spec.validated()?;
        let label = format!("{spec:?}");
        Ok(match *spec {
            FieldSpec::Zero => SigmaField {
                constant: Some(0.0),
                ..SigmaField::from_fn(label, 0.0, 0.0, |_, _| 0.0)
            },
            FieldSpec::Constant { value } => SigmaField {
                constant: Some(value),
                ..SigmaField::from_fn(label, value, 0.0, move |_, _| value)
            },
            FieldSpec::SmoothSpace {
                value,
                amplitude,
                wavevector,
            } => {
                let kv = Vec3(wavevector);
                SigmaField {
                    wave: Some((value, amplitude, kv)),
                    ..SigmaField::from_fn(
                        label,
                        value * (1.0 + amplitude.abs()),
                        value * amplitude.abs() * kv.norm(),
                        move |x, _| value * (1.0 + amplitude * kv.dot(x).sin()),
                    )
                }
            }
            FieldSpec::Anisotropic { .. } | FieldSpec::Directed { .. } => unreachable!("rejected by catalog check"),
        })
    }

    #[inline]
    pub fn eval(&self, x: Vec3, v: Vec3) -> f64 {
        (self.eval)(x, v)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn constant_value(&self) -> Option<f64> {
        self.constant
    }

    pub fn provenance(&self) -> SigmaProvenance {
        self.provenance
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// `sigma(x, v) = int_V K(x, v', v) dv'`.
///
/// Catalog kernels carry their closed-form integral and use it directly;
/// other kernels are integrated with `rule`.
pub fn sigma_from_kernel(kernel: &KernelField, rule: &SphereRule) -> SigmaField {
    let bound = kernel.bound * SPHERE_AREA;
    let label = format!("derived({})", kernel.label);
    let mut out = match &kernel.closed_sigma {
        Some(spec) => SigmaField::builtin(spec).expect("closed forms are valid sigma specs"),
        None => {
            let k = kernel.eval.clone();
            let rule = rule.clone();
            SigmaField::from_fn(label.clone(), bound, kernel.lipschitz * SPHERE_AREA, move |x, v| {
                rule.iter().map(|(w, wt)| wt * k(x, w, v)).sum()
            })
        }
    };
    out.bound = bound;
    out.provenance = SigmaProvenance::DerivedFromKernel;
    out.label = label;
    out
}

/// Quadrature-only variant of [`sigma_from_kernel`], ignoring closed forms.
pub fn sigma_from_kernel_quadrature(kernel: &KernelField, rule: &SphereRule) -> SigmaField {
    let stripped = KernelField {
        closed_sigma: None,
        ..kernel.clone()
    };
    sigma_from_kernel(&stripped, rule)
}

/// `int_0^t sigma(x - v s, v) ds`, relative tolerance 1e-9.
pub fn line_integral_sigma(sigma: &SigmaField, x: Vec3, v: Vec3, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("line integral needs t >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    if let Some(c) = sigma.constant {
        return Ok(c * t);
    }
    if let Some((value, amplitude, k)) = sigma.wave {
        // int_0^t sin(c - w s) ds = 2 sin(c - w t / 2) sin(w t / 2) / w
        let (c, half) = (k.dot(x), 0.5 * k.dot(v) * t);
        let sinc = if half.abs() < 1e-4 { 1.0 - half * half / 6.0 } else { half.sin() / half };
        return Ok(value * (t + amplitude * (c - half).sin() * t * sinc));
    }
    let (val, _) = integrate_adaptive(|s| sigma.eval(x - v * s, v), 0.0, t, 1e-9, 1e-12)?;
    Ok(val)
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub kernel: KernelField,
    pub sigma: SigmaField,
    pub horizon: f64,
}

impl ModelConfig {
    /// Mass-conserving model with `sigma` derived from `kernel`.
    pub fn derived(kernel: KernelField, horizon: f64) -> Self {
        let rule = sphere_quadrature(32).expect("order 32 is valid");
        let sigma = sigma_from_kernel(&kernel, &rule);
        ModelConfig { kernel, sigma, horizon }
    }

    pub fn independent(kernel: KernelField, sigma: SigmaField, horizon: f64) -> Self {
        ModelConfig { kernel, sigma, horizon }
    }

    /// `C_K |V| T`.
    pub fn admissibility_product(&self) -> f64 {
        self.kernel.bound * SPHERE_AREA * self.horizon
    }

    pub fn is_derived(&self) -> bool {
        self.sigma.provenance == SigmaProvenance::DerivedFromKernel
    }

    /// Error unless `C_K |V| T < 1`.
    pub fn require_series_admissible(&self) -> Result<()> {
        let p = self.admissibility_product();
        if p < 1.0 {
            Ok(())
        } else {
            Err(Error::Admissibility(format!(
                "C_K*4pi*T = {p:.4} >= 1 ({} with T = {})",
                self.kernel.label, self.horizon
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub check: String,
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub v_prev: [f64; 3],
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub product: f64,
    pub violations: Vec<Violation>,
    pub sigma_experiments_permitted: bool,
    pub k_experiments_permitted: bool,
    pub series_truncation_permitted: bool,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const VALIDATION_SAMPLES: usize = 10_000;
pub const VALIDATION_SEED: u64 = 0x5eed_0f_f1e1d;

/// Sampled admissibility check over the cube `[-2, 2]^3`.
pub fn validate_admissible(config: &ModelConfig) -> ValidationReport {
    validate_admissible_with(config, VALIDATION_SAMPLES, VALIDATION_SEED, 2.0)
}

pub fn validate_admissible_with(config: &ModelConfig, samples: usize, seed: u64, half_width: f64) -> ValidationReport {
    let mut rng = stream(seed, 0);
    let mut violations = Vec::new();
    let k = &config.kernel;
    let s = &config.sigma;
    let slack = 1e-12;
    let h = 1e-4;
    let mut push = |check: &str, x: Vec3, v: Vec3, w: Vec3, value: f64| {
        if violations.len() < 64 {
            violations.push(Violation {
                check: check.to_string(),
                x: x.0,
                v: v.0,
                v_prev: w.0,
                value,
            });
        }
    };
    let unit_step = |rng: &mut crate::rng::StreamRng| uniform_direction(rng) * h;
    for _ in 0..samples {
        let x = Vec3::new(
            rng.gen_range(-half_width..=half_width),
            rng.gen_range(-half_width..=half_width),
            rng.gen_range(-half_width..=half_width),
        );
        let v = uniform_direction(&mut rng);
        let w = uniform_direction(&mut rng);
        let kv = k.eval(x, v, w);
        if !(kv >= -slack && kv <= k.bound * (1.0 + 1e-12) + slack) {
            push("kernel bound 0 <= K <= C_K", x, v, w, kv);
        }
        let sv = s.eval(x, v);
        if !(sv >= -slack && sv <= s.bound * (1.0 + 1e-12) + slack) {
            push("sigma bound 0 <= sigma <= C_sigma", x, v, w, sv);
        }
        let dx = unit_step(&mut rng);
        let dv = UnitVelocity::from_unit(v + unit_step(&mut rng)).as_vec();
        let dw = UnitVelocity::from_unit(w + unit_step(&mut rng)).as_vec();
        let dist = dx.norm() + (dv - v).norm() + (dw - w).norm();
        let dk = (k.eval(x + dx, dv, dw) - kv).abs();
        if dk > k.lipschitz * dist * (1.0 + 1e-6) + 1e-12 {
            push("kernel Lipschitz modulus", x, v, w, dk / dist);
        }
        let ds = (s.eval(x + dx, dv) - sv).abs();
        if ds > s.lipschitz * (dx.norm() + (dv - v).norm()) * (1.0 + 1e-6) + 1e-12 {
            push("sigma Lipschitz modulus", x, v, w, ds / dist);
        }
    }
    if config.is_derived() {
        let rule = sphere_quadrature(32).expect("valid order");
        for _ in 0..100 {
            let x = Vec3::new(
                rng.gen_range(-half_width..=half_width),
                rng.gen_range(-half_width..=half_width),
                rng.gen_range(-half_width..=half_width),
            );
            let v = uniform_direction(&mut rng);
            let q = rule.integrate(|w| k.eval(x, w, v));
            let sv = s.eval(x, v);
            if (q - sv).abs() > 1e-8 * (1.0 + q.abs()) {
                push("derived sigma equals int K(x, v', v) dv'", x, v, v, sv - q);
            }
        }
    }
    let product = config.admissibility_product();
    let clean = violations.is_empty();
    ValidationReport {
        samples,
        product,
        violations,
        sigma_experiments_permitted: clean,
        k_experiments_permitted: clean && product < 1.0,
        series_truncation_permitted: clean && product < 1.0,
    }
}
