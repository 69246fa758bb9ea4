//! Ladder experiments recovering `sigma` and `K` from measurements.
//!
//! A ladder runs the same probe family at a decreasing sequence of `eps`,
//! with the inner scales tied to `eps` through [`InnerRatio`]. Each rung
//! turns its measurement(s) into a recovered value; the report carries the
//! per-rung values, deviations, a monotonicity flag and the final estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{line_integral_sigma, ModelConfig};
use crate::geometry::UnitVelocity;
use crate::measurement::{measure_particle, measure_probe, MeasurementResult};
use crate::particles::simulate_particles;
use crate::probe::{build_k_probe, c_phipsi, Probe, ProbeBumps, SigmaProbe};
use crate::rng::derive_seed;
use crate::solver::QuadratureSpec;
use crate::vec3::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    SigmaLine,
    SigmaPoint,
    KPoint,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::SigmaLine => "sigma-line",
            Target::SigmaPoint => "sigma-point",
            Target::KPoint => "k-point",
        }
    }

    pub fn is_sigma(self) -> bool {
        !matches!(self, Target::KPoint)
    }
}

/// How the inner scales `delta = eta (= nu)` follow `eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerRatio {
    /// Inner scales `eps^2`.
    Eps,
    /// Inner scales `ratio * eps`.
    Fixed(f64),
}

impl InnerRatio {
    pub fn ratio(self, eps: f64) -> f64 {
        match self {
            InnerRatio::Eps => eps,
            InnerRatio::Fixed(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSpec {
    pub target: Target,
    /// Strictly decreasing.
    pub eps: Vec<f64>,
    pub inner_ratio: InnerRatio,
    pub x_i: Vec3,
    pub v_i: UnitVelocity,
    /// Measurement time of the sigma probes.
    pub t_m: f64,
    pub v_hat: UnitVelocity,
    pub lambda: f64,
    pub alpha: f64,
    /// Series depth `N`.
    pub depth: usize,
    pub quadrature: QuadratureSpec,
    pub seed: u64,
    /// Finite-difference step relative to `t_m` (sigma-point only).
    pub fd_step: f64,
    pub richardson: bool,
    /// Particle-oracle count per measurement; 0 disables the oracle.
    pub particles: usize,
    pub bumps: ProbeBumps,
}

impl LadderSpec {
    /// Defaults of a sigma line-integral ladder from `x_i` along `v_i`.
    pub fn sigma(x_i: Vec3, v_i: UnitVelocity, t_m: f64) -> Self {
        LadderSpec {
            target: Target::SigmaLine,
            eps: vec![0.2, 0.1, 0.05],
            inner_ratio: InnerRatio::Eps,
            x_i,
            v_i,
            t_m,
            v_hat: UnitVelocity::e2(),
            lambda: crate::probe::DEFAULT_LAMBDA,
            alpha: crate::probe::DEFAULT_ALPHA,
            depth: 3,
            quadrature: QuadratureSpec::default(),
            seed: 1,
            fd_step: 0.05,
            richardson: false,
            particles: 0,
            bumps: ProbeBumps::standard(),
        }
    }

    /// Defaults of a kernel ladder at `(x_i, v_hat, v_i)`.
    pub fn kernel(x_i: Vec3, v_i: UnitVelocity, v_hat: UnitVelocity) -> Self {
        LadderSpec {
            target: Target::KPoint,
            eps: vec![1e-4, 2e-5, 4e-6],
            v_hat,
            ..LadderSpec::sigma(x_i, v_i, 0.5)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps.is_empty() {
            return Err(Error::config("ladder needs at least one eps"));
        }
        if self.eps.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::config("ladder eps must be positive"));
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("ladder eps must be strictly decreasing"));
        }
        if let InnerRatio::Fixed(r) = self.inner_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::config(format!("inner_ratio must lie in (0,1), got {r}")));
            }
        }
        if self.target == Target::SigmaPoint && !(self.fd_step > 0.0 && self.fd_step < 1.0) {
            return Err(Error::config(format!("fd_step must lie in (0,1), got {}", self.fd_step)));
        }
        self.quadrature.validate()
    }

    /// `(label, t_m)` of the sigma measurements in one rung.
    fn stencil(&self) -> Vec<(&'static str, f64)> {
        match self.target {
            Target::SigmaLine => vec![("center", self.t_m)],
            Target::SigmaPoint => {
                let h = self.fd_step * self.t_m;
                let mut s = vec![("minus", self.t_m - h), ("plus", self.t_m + h)];
                if self.richardson {
                    s.push(("half-minus", self.t_m - h / 2.0));
                    s.push(("half-plus", self.t_m + h / 2.0));
                }
                s
            }
            Target::KPoint => vec![("center", 0.0)],
        }
    }

    /// Probe of one stencil point at `eps`.
    pub fn probe(&self, eps: f64, t_m: f64) -> Result<Probe> {
        let r = self.inner_ratio.ratio(eps);
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::config(format!("inner ratio {r} at eps = {eps} must lie in (0,1)")));
        }
        match self.target {
            Target::KPoint => Ok(Probe::K(build_k_probe(
                self.x_i, self.v_i, self.v_hat, self.lambda, self.alpha, eps, r, self.bumps,
            )?)),
            _ => Ok(Probe::Sigma(SigmaProbe::new(self.x_i, self.v_i, t_m, eps, r, self.bumps)?)),
        }
    }

    /// All probes of rung `eps`, with labels.
    pub fn rung_probes(&self, eps: f64) -> Result<Vec<(&'static str, Probe)>> {
        self.stencil().into_iter().map(|(l, t)| Ok((l, self.probe(eps, t)?))).collect()
    }

    /// Measurement point `x_m` (sigma point target) or tumble location.
    pub fn x_m(&self) -> Vec3 {
        self.x_i + self.v_i.as_vec() * self.t_m
    }
}

/// Source of measurements for a ladder; allows caching around the series
/// solver.
pub trait Measurer: Sync {
    fn measure(&self, probe: &Probe, seed: u64) -> Result<MeasurementResult>;
}

/// Series measurement of a fixed model.
pub struct SeriesMeasurer<'a> {
    pub model: &'a ModelConfig,
    pub quadrature: QuadratureSpec,
    pub depth: usize,
}

impl Measurer for SeriesMeasurer<'_> {
    fn measure(&self, probe: &Probe, seed: u64) -> Result<MeasurementResult> {
        measure_probe(self.model, probe, self.quadrature, seed, self.depth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StencilMeasurement {
    pub label: String,
    pub t_m: f64,
    pub seed: u64,
    pub series: MeasurementResult,
    pub particle: Option<MeasurementResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungReport {
    pub index: usize,
    pub eps: f64,
    pub inner: f64,
    pub measurements: Vec<StencilMeasurement>,
    /// Recovered value from the full measurement.
    pub recovered: f64,
    /// Recovered value from the leading order alone (order 0 for sigma,
    /// order 1 for K).
    pub recovered_leading: f64,
    /// Richardson value of the finite difference (sigma-point only).
    pub richardson: Option<f64>,
    pub deviation: Option<f64>,
}

impl RungReport {
    /// The central (or first) measurement.
    pub fn primary(&self) -> &StencilMeasurement {
        &self.measurements[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungFailure {
    pub index: usize,
    pub eps: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub target: Target,
    pub c_phipsi: f64,
    pub truth: Option<f64>,
    pub rungs: Vec<RungReport>,
    pub failures: Vec<RungFailure>,
    pub partial: bool,
    /// Finest successful rung's recovered value.
    pub final_estimate: Option<f64>,
    /// Finest rung's Richardson value, when requested.
    pub final_richardson: Option<f64>,
    /// Linear-in-eps extrapolation from the two finest rungs.
    pub extrapolated: Option<f64>,
    /// Deviation non-increasing over the last three rungs (`None` for
    /// fewer than three rungs).
    pub monotone: Option<bool>,
}

/// `-ln(M / C)`.
pub fn line_integral_from(m: f64, c: f64) -> Result<f64> {
    if !(m > 0.0) {
        return Err(Error::Inversion(format!("measurement {m:e} is not positive; cannot take the log")));
    }
    Ok(-(m / c).ln())
}

/// Known value of the target for a model, when it can be computed from the
/// fields.
pub fn ground_truth(model: &ModelConfig, spec: &LadderSpec) -> Result<f64> {
    let v = spec.v_i.as_vec();
    match spec.target {
        Target::SigmaLine => line_integral_sigma(&model.sigma, spec.x_i + v * spec.t_m, v, spec.t_m),
        Target::SigmaPoint => Ok(model.sigma.eval(spec.x_m(), v)),
        Target::KPoint => Ok(model.kernel.eval(spec.x_i, spec.v_hat.as_vec(), v)),
    }
}

fn recover(spec: &LadderSpec, c: f64, ms: &[StencilMeasurement]) -> Result<(f64, f64, Option<f64>)> {
    let lead = |m: &MeasurementResult| match spec.target {
        Target::KPoint => m.order_value(1),
        _ => m.order_value(0),
    };
    match spec.target {
        Target::KPoint => Ok((ms[0].series.total, lead(&ms[0].series), None)),
        Target::SigmaLine => Ok((
            line_integral_from(ms[0].series.total, c)?,
            line_integral_from(lead(&ms[0].series), c)?,
            None,
        )),
        Target::SigmaPoint => {
            let h = spec.fd_step * spec.t_m;
            let diff = |a: &MeasurementResult, b: &MeasurementResult, h: f64, f: &dyn Fn(&MeasurementResult) -> f64| -> Result<f64> {
                Ok((line_integral_from(f(b), c)? - line_integral_from(f(a), c)?) / (2.0 * h))
            };
            let total = |m: &MeasurementResult| m.total;
            let d = diff(&ms[0].series, &ms[1].series, h, &total)?;
            let dl = diff(&ms[0].series, &ms[1].series, h, &lead)?;
            let rich = if ms.len() >= 4 {
                let d2 = diff(&ms[2].series, &ms[3].series, h / 2.0, &total)?;
                Some((4.0 * d2 - d) / 3.0)
            } else {
                None
            };
            Ok((d, dl, rich))
        }
    }
}

fn run_rung(
    spec: &LadderSpec,
    model: &ModelConfig,
    measurer: &dyn Measurer,
    c: f64,
    truth: Option<f64>,
    index: usize,
) -> Result<RungReport> {
    let eps = spec.eps[index];
    let probes = spec.rung_probes(eps)?;
    let measured: Vec<Result<StencilMeasurement>> = probes
        .par_iter()
        .enumerate()
        .map(|(k, (label, probe))| {
            let seed = derive_seed(spec.seed, (index as u64) << 8 | k as u64);
            let series = measurer.measure(probe, seed)?;
            let particle = if spec.particles > 0 {
                let ens = simulate_particles(model, &probe.initial()?, spec.particles, seed)?;
                Some(measure_particle(&ens, probe)?)
            } else {
                None
            };
            Ok(StencilMeasurement {
                label: (*label).to_string(),
                t_m: probe.t_m(),
                seed,
                series,
                particle,
            })
        })
        .collect();
    let measurements = measured.into_iter().collect::<Result<Vec<_>>>()?;
    let (recovered, recovered_leading, richardson) = recover(spec, c, &measurements)?;
    let best = richardson.unwrap_or(recovered);
    Ok(RungReport {
        index,
        eps,
        inner: spec.inner_ratio.ratio(eps) * eps,
        measurements,
        recovered,
        recovered_leading,
        richardson,
        deviation: truth.map(|t| best - t),
    })
}

/// Runs every rung (in parallel) and assembles the report. Rung failures
/// are recorded and mark the report partial.
pub fn run_ladder(spec: &LadderSpec, model: &ModelConfig, measurer: &dyn Measurer, truth: Option<f64>) -> Result<LadderReport> {
    spec.validate()?;
    if spec.target == Target::KPoint {
        model.require_series_admissible()?;
    }
    let c = c_phipsi(&spec.bumps.phi_x, &spec.bumps.psi_x)?;
    let results: Vec<Result<RungReport>> = (0..spec.eps.len())
        .into_par_iter()
        .map(|i| run_rung(spec, model, measurer, c, truth, i))
        .collect();
    let mut rungs = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => rungs.push(r),
            Err(e) => failures.push(RungFailure { index: i, eps: spec.eps[i], error: e.to_string() }),
        }
    }
    let best = |r: &RungReport| r.richardson.unwrap_or(r.recovered);
    let extrapolated = match rungs.as_slice() {
        [.., a, b] => Some((a.eps * best(b) - b.eps * best(a)) / (a.eps - b.eps)),
        _ => None,
    };
    let reference = truth.or(extrapolated);
    let monotone = if rungs.len() >= 3 {
        reference.map(|r| {
            let d: Vec<f64> = rungs[rungs.len() - 3..].iter().map(|x| (best(x) - r).abs()).collect();
            d[1] <= d[0] && d[2] <= d[1]
        })
    } else {
        None
    };
    Ok(LadderReport {
        target: spec.target,
        c_phipsi: c,
        truth,
        final_estimate: rungs.last().map(|r| r.recovered),
        final_richardson: rungs.last().and_then(|r| r.richardson),
        partial: !failures.is_empty(),
        rungs,
        failures,
        extrapolated,
        monotone,
    })
}

/// [`run_ladder`] with the plain series measurer.
pub fn run_series_ladder(spec: &LadderSpec, model: &ModelConfig, truth: Option<f64>) -> Result<LadderReport> {
    let m = SeriesMeasurer { model, quadrature: spec.quadrature, depth: spec.depth };
    run_ladder(spec, model, &m, truth)
}

/// `-ln(M / C_phipsi)` along the ladder, i.e. the line integral of sigma
/// from `x_i` over `[0, t_m]`.
pub fn recover_line_integral(model: &ModelConfig, spec: &LadderSpec) -> Result<LadderReport> {
    let spec = LadderSpec { target: Target::SigmaLine, ..spec.clone() };
    run_series_ladder(&spec, model, ground_truth(model, &spec).ok())
}

/// Central difference of the line integral in `t_m` at `x_m = x_i + v_i t_m`.
pub fn recover_sigma_point(model: &ModelConfig, spec: &LadderSpec) -> Result<LadderReport> {
    let spec = LadderSpec { target: Target::SigmaPoint, ..spec.clone() };
    run_series_ladder(&spec, model, ground_truth(model, &spec).ok())
}

/// Full measurement of the K-probe ladder at `(x_i, v_hat, v_i)`.
pub fn recover_k_point(model: &ModelConfig, spec: &LadderSpec) -> Result<LadderReport> {
    let spec = LadderSpec { target: Target::KPoint, ..spec.clone() };
    run_series_ladder(&spec, model, ground_truth(model, &spec).ok())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub index: usize,
    pub eps: f64,
    pub total: f64,
    pub order0_share: f64,
    pub order1_share: f64,
    /// Measured `rho_{>=2}`: sampled orders `2..=N` plus the tail estimate.
    pub tail_ge2: f64,
    pub tail_ge2_error: f64,
    /// Tail past depth `N` against its analytic bound.
    pub tail_estimate: Option<f64>,
    pub tail_error: Option<f64>,
    pub tail_bound: f64,
    pub tail_within_bound: Option<bool>,
    /// `C eps^(4 alpha - 3)` with `C` fitted on the coarsest rung (K only).
    pub scaling_bound: Option<f64>,
    pub scaling_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rows: Vec<DiagnosticRow>,
    /// Least-squares slope of `ln tail_ge2` against `ln eps` (K only).
    pub fitted_exponent: Option<f64>,
    pub expected_exponent: Option<f64>,
}

/// Per-rung order shares, tail-versus-bound checks and the `eps^(4 alpha - 3)`
/// scaling check for kernel ladders.
pub fn lemma_diagnostics(report: &LadderReport, alpha: f64) -> Diagnostics {
    let mut rows: Vec<DiagnosticRow> = report
        .rungs
        .iter()
        .map(|r| {
            let m = &r.primary().series;
            let share = |n| if m.total != 0.0 { m.order_value(n) / m.total } else { 0.0 };
            let (mut t2, e2) = m.from_order(2);
            let mut e2sq = e2 * e2;
            if let Some(t) = m.tail_estimate {
                t2 += t.value;
                e2sq += t.error * t.error;
            }
            let tail_within_bound = m.tail_estimate.map(|t| t.value <= m.tail_bound + 3.0 * t.error);
            DiagnosticRow {
                index: r.index,
                eps: r.eps,
                total: m.total,
                order0_share: share(0),
                order1_share: share(1),
                tail_ge2: t2,
                tail_ge2_error: e2sq.sqrt(),
                tail_estimate: m.tail_estimate.map(|t| t.value),
                tail_error: m.tail_estimate.map(|t| t.error),
                tail_bound: m.tail_bound,
                tail_within_bound,
                scaling_bound: None,
                scaling_ok: None,
            }
        })
        .collect();
    let mut fitted = None;
    let mut expected = None;
    if report.target == Target::KPoint && !rows.is_empty() {
        let p = 4.0 * alpha - 3.0;
        expected = Some(p);
        let c = rows[0].tail_ge2 / rows[0].eps.powf(p);
        for row in rows.iter_mut() {
            let b = c * row.eps.powf(p);
            row.scaling_bound = Some(b);
            row.scaling_ok = Some(row.tail_ge2 <= b + 3.0 * row.tail_ge2_error);
        }
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.tail_ge2 > 0.0)
            .map(|r| (r.eps.ln(), r.tail_ge2.ln()))
            .collect();
        if pts.len() >= 2 {
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            if sxx > 0.0 {
                fitted = Some(sxy / sxx);
            }
        }
    }
    Diagnostics { rows, fitted_exponent: fitted, expected_exponent: expected }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldSpec, KernelField};

    fn zero_model() -> ModelConfig {
        ModelConfig::derived(KernelField::builtin(&FieldSpec::Zero).unwrap(), 1.0)
    }

    #[test]
    fn eps_must_decrease() {
        let mut s = LadderSpec::sigma(Vec3::ZERO, UnitVelocity::e1(), 0.5);
        s.eps = vec![0.1, 0.2];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn nonpositive_measurement_cannot_be_inverted() {
        assert!(matches!(line_integral_from(0.0, 0.8), Err(Error::Inversion(_))));
        assert!((line_integral_from(0.8, 0.8).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn single_rung_has_no_monotonicity_flag() {
        let mut s = LadderSpec::sigma(Vec3::ZERO, UnitVelocity::e1(), 0.5);
        s.eps = vec![0.1];
        let r = recover_line_integral(&zero_model(), &s).unwrap();
        assert_eq!(r.rungs.len(), 1);
        assert!(r.monotone.is_none());
        assert!(r.final_estimate.unwrap().abs() < 0.02);
    }

    #[test]
    fn infeasible_rung_makes_partial_report() {
        let mut s = LadderSpec::sigma(Vec3::ZERO, UnitVelocity::e1(), 0.05);
        // at eps = 0.2 the time window eta R reaches t = 0
        s.eps = vec![0.2, 0.02];
        s.inner_ratio = InnerRatio::Fixed(0.5);
        let r = recover_line_integral(&zero_model(), &s).unwrap();
        assert!(r.partial);
        assert_eq!(r.failures[0].index, 0);
        assert!(r.failures[0].error.contains("probe error"));
        assert_eq!(r.rungs.len(), 1);
    }
}
