//! Forward model by collision order: closed-form `f0`, quadrature for `f1`,
//! Monte Carlo for higher orders, and the series remainder bound.
//!
//! The density of once-scattered particles is computed in scattering
//! coordinates: for fixed pre-tumble velocity `v'`, the map
//! `(s, v) -> z = s (v - v')` has Jacobian `|z|^2 / 2`, so in polar form
//! `z = r Omega` the measure `ds dv` becomes `2 dr dOmega`. The spatial
//! factor of `phi` is then a bump in `z` centred at `b = x - x_i - v' t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{line_integral_sigma, ModelConfig};
use crate::geometry::{sphere_quadrature, tangent_frame, SphereRule, UnitVelocity, SPHERE_AREA};
use crate::probe::InitialData;
use crate::quadrature::GaussRule;
use crate::rng::{derive_seed, stream, uniform_direction, StreamRng};
use crate::vec3::Vec3;

/// Samples per RNG stream; streams are keyed by chunk index, never by thread.
pub const MC_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapRule {
    pub radial: usize,
    pub azimuth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowRule {
    pub radial: usize,
    pub polar: usize,
    pub azimuth: usize,
    pub time: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZRule {
    pub radial: usize,
    pub polar: usize,
    pub azimuth: usize,
}

/// Rule orders for every deterministic integral. Radial and time orders
/// are per panel (panels split at plateau radii).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    pub sphere_order: usize,
    pub time_order: usize,
    pub cap: CapRule,
    pub window: WindowRule,
    pub window1: WindowRule,
    pub cap1: CapRule,
    pub z: ZRule,
    pub z_mc: ZRule,
    pub mc_samples: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            sphere_order: 32,
            time_order: 8,
            cap: CapRule { radial: 6, azimuth: 12 },
            window: WindowRule {
                radial: 8,
                polar: 8,
                azimuth: 16,
                time: 6,
            },
            window1: WindowRule {
                radial: 6,
                polar: 4,
                azimuth: 8,
                time: 3,
            },
            cap1: CapRule { radial: 4, azimuth: 4 },
            z: ZRule {
                radial: 6,
                polar: 8,
                azimuth: 16,
            },
            z_mc: ZRule {
                radial: 4,
                polar: 4,
                azimuth: 8,
            },
            mc_samples: 2048,
        }
    }
}

fn scale_order(n: usize, level: i32, min: usize) -> usize {
    if level >= 0 {
        n << level
    } else {
        let d = 1usize << (-level);
        n.div_ceil(d).max(min)
    }
}

impl QuadratureSpec {
    /// Applies `f(order, minimum)` to every rule order.
    fn map_orders(&self, f: impl Fn(usize, usize) -> usize) -> Self {
        let s = |n| f(n, 1);
        let a = |n| f(n, 2);
        let w = |r: WindowRule| WindowRule {
            radial: s(r.radial),
            polar: s(r.polar),
            azimuth: a(r.azimuth),
            time: s(r.time),
        };
        let z = |r: ZRule| ZRule {
            radial: s(r.radial),
            polar: s(r.polar),
            azimuth: a(r.azimuth),
        };
        let c = |r: CapRule| CapRule {
            radial: s(r.radial),
            azimuth: a(r.azimuth),
        };
        QuadratureSpec {
            sphere_order: f(self.sphere_order, 2),
            time_order: s(self.time_order),
            cap: c(self.cap),
            window: w(self.window),
            window1: w(self.window1),
            cap1: c(self.cap1),
            z: z(self.z),
            z_mc: z(self.z_mc),
            mc_samples: self.mc_samples,
        }
    }

    /// Doubles (`level > 0`) or halves (`level < 0`) every rule order.
    pub fn refined(&self, level: i32) -> Self {
        self.map_orders(|n, min| scale_order(n, level, min))
    }

    /// Companion rule with every order cut to three quarters; the spread
    /// against it is the reported quadrature error.
    pub fn coarse(&self) -> Self {
        self.map_orders(|n, min| (n * 3 / 4).max(min))
    }

    pub fn validate(&self) -> Result<()> {
        let orders = [
            self.time_order,
            self.cap.radial,
            self.window.radial,
            self.window.polar,
            self.window.time,
            self.window1.radial,
            self.window1.polar,
            self.window1.time,
            self.cap1.radial,
            self.z.radial,
            self.z.polar,
            self.z_mc.radial,
            self.z_mc.polar,
        ];
        let az = [
            self.cap.azimuth,
            self.window.azimuth,
            self.window1.azimuth,
            self.cap1.azimuth,
            self.z.azimuth,
            self.z_mc.azimuth,
        ];
        if orders.iter().any(|&n| n == 0) || az.iter().any(|&n| n < 2) || self.sphere_order < 2 {
            return Err(Error::config("quadrature orders must be >= 1 (azimuths >= 2, sphere order >= 2)"));
        }
        if self.mc_samples < 100 {
            return Err(Error::config(format!("mc_samples must be >= 100, got {}", self.mc_samples)));
        }
        Ok(())
    }
}

/// Gauss rules and azimuth table for one scattering-coordinate rule.
#[derive(Debug, Clone)]
pub struct PreparedZ {
    radial: GaussRule,
    polar: GaussRule,
    azimuth: Vec<(f64, f64)>,
}

impl PreparedZ {
    pub fn new(rule: ZRule) -> Self {
        let n = rule.azimuth;
        let d = std::f64::consts::TAU / n as f64;
        PreparedZ {
            radial: GaussRule::new(rule.radial),
            polar: GaussRule::new(rule.polar),
            azimuth: (0..n).map(|k| ((k as f64 + 0.5) * d).sin_cos()).map(|(s, c)| (c, s)).collect(),
        }
    }

    fn dphi(&self) -> f64 {
        std::f64::consts::TAU / self.azimuth.len() as f64
    }
}

/// Parameter interval `{s : |b - s u| <= radius}`, if nonempty.
#[inline]
pub(crate) fn chord(b: Vec3, u: Vec3, radius: f64) -> Option<(f64, f64)> {
    let a = u.norm_squared();
    let c = b.norm_squared() - radius * radius;
    if a < 1e-300 {
        return if c < 0.0 { Some((f64::NEG_INFINITY, f64::INFINITY)) } else { None };
    }
    let p = b.dot(u) / a;
    let disc = p * p - c / a;
    if disc <= 0.0 {
        return None;
    }
    let h = disc.sqrt();
    Some((p - h, p + h))
}

/// Panel breaks of the chord through a plateau bump, clipped to `[lo, hi]`.
pub(crate) fn chord_panels(b: Vec3, u: Vec3, outer: f64, plateau: f64, lo: f64, hi: f64, out: &mut Vec<f64>) {
    out.clear();
    let Some((a0, a1)) = chord(b, u, outer) else { return };
    let (a0, a1) = (a0.max(lo), a1.min(hi));
    if a1 <= a0 {
        return;
    }
    out.push(a0);
    if let Some((p0, p1)) = chord(b, u, plateau) {
        for p in [p0, p1] {
            if p > a0 && p < a1 {
                out.push(p);
            }
        }
    }
    out.push(a1);
}

/// `(C_K |V| T)^(N+1) exp(C_K |V| T)`.
pub fn remainder_bound(n: usize, model: &ModelConfig) -> Result<f64> {
    model.require_series_admissible()?;
    let p = model.admissibility_product();
    Ok(p.powi(n as i32 + 1) * p.exp())
}

/// Evaluator for the collision-order components of the solution with
/// initial data `source`.
#[derive(Debug, Clone)]
pub struct CollisionEvaluator {
    model: ModelConfig,
    source: InitialData,
    spec: QuadratureSpec,
    seed: u64,
    cap_mass: f64,
    s_rule: GaussRule,
    cap0: Vec<(Vec3, f64)>,
    cap1: Vec<(Vec3, f64)>,
    z: PreparedZ,
    z_mc: PreparedZ,
    sphere: SphereRule,
}

impl CollisionEvaluator {
    pub fn new(model: ModelConfig, source: InitialData, spec: QuadratureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(CollisionEvaluator {
            cap_mass: source.cap_mass()?,
            s_rule: GaussRule::new(spec.time_order),
            cap0: source.cap_rule(spec.cap.radial, spec.cap.azimuth),
            cap1: source.cap_rule(spec.cap1.radial, spec.cap1.azimuth),
            z: PreparedZ::new(spec.z),
            z_mc: PreparedZ::new(spec.z_mc),
            sphere: sphere_quadrature(spec.sphere_order)?,
            model,
            source,
            spec,
            seed,
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn source(&self) -> &InitialData {
        &self.source
    }

    pub fn spec(&self) -> &QuadratureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `int int phi dv dx` as computed (1 only in the `delta -> 0` limit).
    pub fn cap_mass(&self) -> f64 {
        self.cap_mass
    }

    pub(crate) fn cap_rule0(&self) -> &[(Vec3, f64)] {
        &self.cap0
    }

    pub(crate) fn cap_rule1(&self) -> &[(Vec3, f64)] {
        &self.cap1
    }

    pub(crate) fn z_rule(&self) -> &PreparedZ {
        &self.z
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t >= 0.0 && t <= self.model.horizon * (1.0 + 1e-12) {
            Ok(())
        } else {
            Err(Error::domain(format!("time {t} outside [0, T = {}]", self.model.horizon)))
        }
    }

    /// `exp(-int_0^t sigma(x - v s, v) ds)`.
    #[inline]
    fn decay(&self, x: Vec3, v: Vec3, t: f64) -> Result<f64> {
        Ok((-line_integral_sigma(&self.model.sigma, x, v, t)?).exp())
    }

    /// `f0 = exp(-int sigma) phi(x - v t, v)`.
    pub fn eval_f0(&self, x: Vec3, t: f64, v: UnitVelocity) -> Result<f64> {
        self.check_time(t)?;
        let p = self.source.eval(x - v.as_vec() * t, v);
        if p == 0.0 {
            return Ok(0.0);
        }
        Ok(self.decay(x, v.as_vec(), t)? * p)
    }

    /// Once-scattered density by quadrature over the tumble delay `s` and
    /// the pre-tumble velocity `v'` (restricted to the velocity cap of `phi`).
    pub fn eval_f1(&self, x: Vec3, t: f64, v: UnitVelocity) -> Result<f64> {
        self.check_time(t)?;
        if t == 0.0 || self.model.kernel.is_zero() {
            return Ok(0.0);
        }
        let src = &self.source;
        let outer = src.spatial_radius();
        let plateau = src.eps * src.phi_x.plateau_radius();
        let vv = v.as_vec();
        let mut panels = Vec::with_capacity(4);
        let mut total = 0.0;
        for &(vp, wc) in &self.cap0 {
            let u = vv - vp;
            let b = x - src.x_i - vp * t;
            chord_panels(b, u, outer, plateau, 0.0, t, &mut panels);
            let mut acc = 0.0;
            for w in panels.windows(2) {
                for (s, ws) in self.s_rule.mapped(w[0], w[1]) {
                    let y = x - vv * s;
                    let k = self.model.kernel.eval(y, vv, vp);
                    if k == 0.0 {
                        continue;
                    }
                    let sp = src.spatial(b - u * s);
                    if sp == 0.0 {
                        continue;
                    }
                    acc += ws * k * self.decay(x, vv, s)? * self.decay(y, vp, t - s)? * sp;
                }
            }
            total += wc * acc;
        }
        Ok(total)
    }

    /// `rho_0(x, t)` on the velocity cap.
    pub fn rho0(&self, x: Vec3, t: f64) -> Result<f64> {
        self.rho0_with(x, t, &self.cap0)
    }

    pub(crate) fn rho0_with(&self, x: Vec3, t: f64, cap: &[(Vec3, f64)]) -> Result<f64> {
        self.check_time(t)?;
        let src = &self.source;
        let mut total = 0.0;
        for &(v, w) in cap {
            let sp = src.spatial(x - v * t - src.x_i);
            if sp == 0.0 {
                continue;
            }
            total += w * sp * self.decay(x, v, t)?;
        }
        Ok(total)
    }

    /// `rho_1(x, t)` in scattering coordinates.
    pub fn rho1(&self, x: Vec3, t: f64) -> Result<f64> {
        self.rho1_with(x, t, &self.cap0, &self.z)
    }

    pub(crate) fn rho1_with(&self, x: Vec3, t: f64, cap: &[(Vec3, f64)], z: &PreparedZ) -> Result<f64> {
        self.check_time(t)?;
        if t == 0.0 || self.model.kernel.is_zero() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &(vp, w) in cap {
            total += w * self.z_stage(x, t, vp, z, |_| 1.0)?;
        }
        Ok(total)
    }

    /// `rho_1(x, t)` as the sphere-rule average of [`Self::eval_f1`].
    pub fn rho1_sphere(&self, x: Vec3, t: f64) -> Result<f64> {
        let mut total = 0.0;
        for (v, w) in self.sphere.iter() {
            total += w * self.eval_f1(x, t, UnitVelocity::from_unit(v))?;
        }
        Ok(total)
    }

    /// `rho_n(x, t)`: orders 0 and 1 deterministic (error 0), higher orders
    /// by Monte Carlo with `spec.mc_samples` samples.
    pub fn eval_rho(&self, order: usize, x: Vec3, t: f64) -> Result<(f64, f64)> {
        match order {
            0 => Ok((self.rho0(x, t)?, 0.0)),
            1 => Ok((self.rho1(x, t)?, 0.0)),
            n => {
                self.check_time(t)?;
                self.mc_mean(self.spec.mc_samples, 0x7268_6f00 + n as u64, |rng| {
                    self.rho_n_sample(n, x, t, rng)
                })
            }
        }
    }

    /// `int dv int ds 2 dr-dOmega` stage: integrates the once-scattered
    /// contribution at `(x, t)` from pre-tumble velocity `vp`, weighted by
    /// `extra(v)` where `v` is the post-tumble velocity.
    pub(crate) fn z_stage(&self, x: Vec3, t: f64, vp: Vec3, rule: &PreparedZ, extra: impl Fn(Vec3) -> f64) -> Result<f64> {
        let src = &self.source;
        let outer = src.spatial_radius();
        let plateau = src.eps * src.phi_x.plateau_radius();
        let b = x - src.x_i - vp * t;
        let bn = b.norm();
        let mut cos_panels = [(0.0, 0.0); 2];
        let axis;
        if bn < outer {
            // blob contains z = 0: integrate the back hemisphere around -vp
            axis = -vp;
            let uk = ((bn + outer) / (2.0 * t)).min(1.0);
            cos_panels[0] = (0.0, uk);
            cos_panels[1] = (uk, 1.0);
        } else {
            axis = b / bn;
            let cmax = (1.0 - (outer / bn).powi(2)).max(0.0).sqrt();
            let cp = if plateau < bn {
                (1.0 - (plateau / bn).powi(2)).max(0.0).sqrt()
            } else {
                cmax
            };
            cos_panels[0] = (cmax, cp);
            cos_panels[1] = (cp, 1.0);
        }
        let (f1, f2) = tangent_frame(axis);
        let dphi = rule.dphi();
        let mut panels = Vec::with_capacity(4);
        let mut total = 0.0;
        for &(lo, hi) in &cos_panels {
            if hi <= lo {
                continue;
            }
            for (c, wc) in rule.polar.mapped(lo, hi) {
                let st = (1.0 - c * c).max(0.0).sqrt();
                for &(ca, sa) in &rule.azimuth {
                    let om = axis * c + f1 * (st * ca) + f2 * (st * sa);
                    let m = -2.0 * om.dot(vp);
                    if m <= 0.0 {
                        continue;
                    }
                    chord_panels(b, om, outer, plateau, 0.0, t * m, &mut panels);
                    if panels.is_empty() {
                        continue;
                    }
                    let v = vp + om * m;
                    let ex = extra(v);
                    if ex == 0.0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for w in panels.windows(2) {
                        for (r, wr) in rule.radial.mapped(w[0], w[1]) {
                            let s = r / m;
                            let y = x - v * s;
                            let k = self.model.kernel.eval(y, v, vp);
                            if k == 0.0 {
                                continue;
                            }
                            let sp = src.spatial(b - om * r);
                            if sp == 0.0 {
                                continue;
                            }
                            acc += wr * k * sp * self.decay(x, v, s)? * self.decay(y, vp, t - s)?;
                        }
                    }
                    total += wc * dphi * 2.0 * ex * acc;
                }
            }
        }
        Ok(total)
    }

    /// One unbiased sample of `rho_n(x, t)`, `n >= 2`: uniform backward legs
    /// down to the first tumble, then a deterministic scattering stage with
    /// one sampled initial velocity.
    pub(crate) fn rho_n_sample(&self, n: usize, x: Vec3, t: f64, rng: &mut StreamRng) -> Result<f64> {
        debug_assert!(n >= 2);
        let kernel = &self.model.kernel;
        let mut w = SPHERE_AREA;
        let mut pos = x;
        let mut rem = t;
        let mut v_cur = uniform_direction(rng);
        for level in (2..=n).rev() {
            let s = rng.gen_range_f64(rem);
            w *= rem * self.decay(pos, v_cur, s)?;
            pos -= v_cur * s;
            rem -= s;
            if level > 2 {
                let v_prev = uniform_direction(rng);
                w *= SPHERE_AREA * kernel.eval(pos, v_cur, v_prev);
                v_cur = v_prev;
            }
            if w == 0.0 || rem <= 0.0 {
                return Ok(0.0);
            }
        }
        let vp = self.source.sample_velocity(rng);
        let z = self.z_stage(pos, rem, vp, &self.z_mc, |v1| kernel.eval(pos, v_cur, v1))?;
        Ok(w * self.cap_mass * z)
    }

    /// Monte Carlo estimate of `f_n(x, t, v)`, `n >= 1`, with its standard
    /// error: uniform backward legs, the initial velocity drawn from the cap.
    pub fn eval_fn_mc(&self, n: usize, x: Vec3, t: f64, v: UnitVelocity, samples: usize) -> Result<(f64, f64)> {
        if samples < 100 {
            return Err(Error::config(format!("eval_fn_mc needs >= 100 samples, got {samples}")));
        }
        if n == 0 {
            return Err(Error::config("eval_fn_mc needs n >= 1; use eval_f0 for order 0"));
        }
        self.check_time(t)?;
        if t == 0.0 || self.model.kernel.is_zero() {
            return Ok((0.0, 0.0));
        }
        let kernel = &self.model.kernel;
        let src = &self.source;
        self.mc_mean(samples, 0x666e_0000 + n as u64, |rng| {
            let mut w = 1.0;
            let mut pos = x;
            let mut rem = t;
            let mut v_cur = v.as_vec();
            for level in (1..=n).rev() {
                let s = rng.gen_range_f64(rem);
                w *= rem * self.decay(pos, v_cur, s)?;
                pos -= v_cur * s;
                rem -= s;
                if level > 1 {
                    let v_prev = uniform_direction(rng);
                    w *= SPHERE_AREA * kernel.eval(pos, v_cur, v_prev);
                    v_cur = v_prev;
                }
                if w == 0.0 {
                    return Ok(0.0);
                }
            }
            let v0 = src.sample_velocity(rng);
            let sp = src.spatial(pos - v0 * rem - src.x_i);
            if sp == 0.0 {
                return Ok(0.0);
            }
            Ok(w * self.cap_mass * kernel.eval(pos, v_cur, v0) * sp * self.decay(pos, v0, rem)?)
        })
    }

    /// Chunked, order-stable Monte Carlo mean and standard error.
    pub(crate) fn mc_mean<F>(&self, samples: usize, tag: u64, f: F) -> Result<(f64, f64)>
    where
        F: Fn(&mut StreamRng) -> Result<f64> + Sync,
    {
        mc_mean(self.seed, samples, tag, f)
    }
}

pub(crate) fn mc_mean<F>(seed: u64, samples: usize, tag: u64, f: F) -> Result<(f64, f64)>
where
    F: Fn(&mut StreamRng) -> Result<f64> + Sync,
{
    let key = derive_seed(seed, tag);
    let chunks = samples.div_ceil(MC_CHUNK);
    let parts: Vec<Result<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(key, c as u64);
            let n = MC_CHUNK.min(samples - c * MC_CHUNK);
            let (mut s, mut ss) = (0.0, 0.0);
            for _ in 0..n {
                let y = f(&mut rng)?;
                s += y;
                ss += y * y;
            }
            Ok((s, ss))
        })
        .collect();
    let (mut s, mut ss) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        s += a;
        ss += b;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = ((ss / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

trait UniformF64 {
    fn gen_range_f64(&mut self, hi: f64) -> f64;
}

impl UniformF64 for StreamRng {
    #[inline]
    fn gen_range_f64(&mut self, hi: f64) -> f64 {
        use rand::Rng;
        self.gen::<f64>() * hi
    }
}
