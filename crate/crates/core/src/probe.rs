//! Singular initial data `phi`, localized test functions `psi`, and the
//! constants `C_phipsi` and `C_sv`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{StereographicChart, TumbleGeometry, UnitVelocity, DEFAULT_MIN_TUMBLE_ANGLE};
use crate::quadrature::{integrate_adaptive, GaussRule};
use crate::vec3::Vec3;

pub const DEFAULT_PLATEAU_FRACTION: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// `C_phipsi` of the default 3-D bump with itself, frozen from a 1e-13
/// radial quadrature.
pub const DEFAULT_C_PHIPSI: f64 = 0.816_459_394_766_818;

fn g(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else {
        (-1.0 / u).exp()
    }
}

/// Smooth step: 1 at `u <= 0`, 0 at `u >= 1`, all derivatives flat at both ends.
fn smooth_step(u: f64) -> f64 {
    if u <= 0.0 {
        1.0
    } else if u >= 1.0 {
        0.0
    } else {
        let a = g(1.0 - u);
        a / (a + g(u))
    }
}

fn unit_sphere_measure(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!("dimension checked at construction"),
    }
}

/// Radial bump: 1 on `|p| <= kappa R`, smooth decay to 0 at `|p| = R <= 1`,
/// with `R` chosen so the integral over `R^d` is 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    dimension: usize,
    plateau_fraction: f64,
    outer_radius: f64,
}

impl BumpProfile {
    pub fn new(dimension: usize, plateau_fraction: f64) -> Result<Self> {
        if !(1..=3).contains(&dimension) {
            return Err(Error::Probe(format!("bump dimension must be 1, 2 or 3, got {dimension}")));
        }
        if !(plateau_fraction > 0.0 && plateau_fraction < 1.0) {
            return Err(Error::Probe(format!(
                "plateau fraction must lie in (0,1), got {plateau_fraction}"
            )));
        }
        let d = dimension as i32;
        let radial = |q: f64| smooth_step((q - plateau_fraction) / (1.0 - plateau_fraction)) * q.powi(d - 1);
        let (inner, _) = integrate_adaptive(radial, 0.0, plateau_fraction, 1e-14, 1e-15)?;
        let (outer, _) = integrate_adaptive(radial, plateau_fraction, 1.0, 1e-14, 1e-15)?;
        let unit_integral = unit_sphere_measure(dimension) * (inner + outer);
        let outer_radius = unit_integral.powf(-1.0 / dimension as f64);
        if outer_radius > 1.0 {
            return Err(Error::Probe(format!(
                "plateau fraction {plateau_fraction} too small: unit mass needs support radius {outer_radius:.4} > 1"
            )));
        }
        Ok(BumpProfile {
            dimension,
            plateau_fraction,
            outer_radius,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn plateau_fraction(&self) -> f64 {
        self.plateau_fraction
    }

    pub fn outer_radius(&self) -> f64 {
        self.outer_radius
    }

    pub fn plateau_radius(&self) -> f64 {
        self.plateau_fraction * self.outer_radius
    }

    /// Profile value at distance `r` from the centre.
    #[inline]
    pub fn radial(&self, r: f64) -> f64 {
        let q = r / self.outer_radius;
        smooth_step((q - self.plateau_fraction) / (1.0 - self.plateau_fraction))
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        self.radial(p.iter().map(|c| c * c).sum::<f64>().sqrt())
    }

    #[inline]
    pub fn eval3(&self, p: Vec3) -> f64 {
        self.radial(p.norm())
    }

    /// Radial panel breaks `[0, kappa R, R]`.
    pub fn breaks(&self) -> [f64; 3] {
        [0.0, self.plateau_radius(), self.outer_radius]
    }

    /// Profile-weighted rule on the ball (dimension 3): weights carry
    /// `profile * r^2 dr dOmega`, rescaled to sum to exactly 1.
    pub fn ball_rule(&self, n_radial: usize, n_polar: usize, n_azimuth: usize) -> Vec<(Vec3, f64)> {
        let gr = GaussRule::new(n_radial);
        let dirs = crate::geometry::SphereRule::polar_panels(Vec3::E3, &[(-1.0, 1.0)], n_polar, n_azimuth);
        let mut out = Vec::with_capacity(2 * n_radial * dirs.len());
        for w in self.breaks().windows(2) {
            for (r, wr) in gr.mapped(w[0], w[1]) {
                let base = wr * r * r * self.radial(r);
                for (d, wd) in dirs.iter() {
                    out.push((d * r, base * wd));
                }
            }
        }
        normalize(&mut out);
        out
    }

    /// Profile-weighted rule on the disk (dimension 2).
    pub fn disk_rule(&self, n_radial: usize, n_azimuth: usize) -> Vec<([f64; 2], f64)> {
        let gr = GaussRule::new(n_radial);
        let dphi = 2.0 * PI / n_azimuth as f64;
        let mut out = Vec::with_capacity(2 * n_radial * n_azimuth);
        for w in self.breaks().windows(2) {
            for (r, wr) in gr.mapped(w[0], w[1]) {
                let base = wr * r * self.radial(r) * dphi;
                for k in 0..n_azimuth {
                    let a = (k as f64 + 0.5) * dphi;
                    out.push(([r * a.cos(), r * a.sin()], base));
                }
            }
        }
        normalize(&mut out);
        out
    }

    /// Profile-weighted rule on the interval (dimension 1).
    pub fn line_rule(&self, n: usize) -> Vec<(f64, f64)> {
        let gr = GaussRule::new(n);
        let (a, b) = (self.plateau_radius(), self.outer_radius);
        let mut out = Vec::with_capacity(3 * n);
        for (lo, hi) in [(-b, -a), (-a, a), (a, b)] {
            for (x, w) in gr.mapped(lo, hi) {
                out.push((x, w * self.radial(x.abs())));
            }
        }
        normalize(&mut out);
        out
    }

    /// Draws a point from the normalized profile density by rejection.
    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        let r = self.outer_radius;
        loop {
            let mut p = [0.0; 3];
            let mut n2 = 0.0;
            for c in p.iter_mut().take(self.dimension) {
                *c = rng.gen_range(-r..r);
                n2 += *c * *c;
            }
            if n2 >= r * r {
                continue;
            }
            if rng.gen::<f64>() < self.radial(n2.sqrt()) {
                return p;
            }
        }
    }
}

/// Rescales rule weights to sum to `target`, making the rule exact on
/// constants.
fn normalize_to<P>(rule: &mut [(P, f64)], target: f64) {
    let s: f64 = rule.iter().map(|p| p.1).sum();
    if s > 0.0 {
        let k = target / s;
        rule.iter_mut().for_each(|p| p.1 *= k);
    }
}

fn normalize<P>(rule: &mut [(P, f64)]) {
    normalize_to(rule, 1.0);
}

/// Default bump of the given dimension.
pub fn make_bump(dimension: usize) -> Result<BumpProfile> {
    BumpProfile::new(dimension, DEFAULT_PLATEAU_FRACTION)
}

/// The four profiles `phi_x`, `phi_v`, `psi_x`, `psi_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeBumps {
    pub phi_x: BumpProfile,
    pub phi_v: BumpProfile,
    pub psi_x: BumpProfile,
    pub psi_t: BumpProfile,
}

impl ProbeBumps {
    pub fn standard() -> Self {
        ProbeBumps::with_plateau(DEFAULT_PLATEAU_FRACTION).expect("default bumps are valid")
    }

    pub fn with_plateau(kappa: f64) -> Result<Self> {
        Ok(ProbeBumps {
            phi_x: BumpProfile::new(3, kappa)?,
            phi_v: BumpProfile::new(2, kappa)?,
            psi_x: BumpProfile::new(3, kappa)?,
            psi_t: BumpProfile::new(1, kappa)?,
        })
    }
}

/// `C = int phi_x psi_x dx` for two centred bumps.
pub fn c_phipsi(phi_x: &BumpProfile, psi_x: &BumpProfile) -> Result<f64> {
    if phi_x.dimension() != 3 || psi_x.dimension() != 3 {
        return Err(Error::Probe("c_phipsi needs two 3-D bumps".into()));
    }
    let f = |r: f64| 4.0 * PI * r * r * phi_x.radial(r) * psi_x.radial(r);
    let r_max = phi_x.outer_radius().min(psi_x.outer_radius());
    let mut cuts = vec![0.0, phi_x.plateau_radius(), psi_x.plateau_radius(), r_max];
    cuts.retain(|&c| c <= r_max);
    cuts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += integrate_adaptive(f, w[0], w[1], 1e-13, 1e-16)?.0;
    }
    Ok(total)
}

/// `int phi_x(x) psi_x(x - offset) dx` by a ball rule on `psi_x`'s support.
pub fn c_phipsi_offset(phi_x: &BumpProfile, psi_x: &BumpProfile, offset: Vec3, n: usize) -> f64 {
    psi_x
        .ball_rule(n, n, 2 * n)
        .into_iter()
        .map(|(p, w)| w * phi_x.eval3(p + offset))
        .sum()
}

/// `phi(x, v) = eps^-3 delta^-2 phi_x((x - x_i)/eps) phi_v(P(v)/delta) j(v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialData {
    pub x_i: Vec3,
    pub v_i: UnitVelocity,
    pub eps: f64,
    pub delta: f64,
    pub phi_x: BumpProfile,
    pub phi_v: BumpProfile,
    pub chart: StereographicChart,
}

impl InitialData {
    pub fn new(x_i: Vec3, v_i: UnitVelocity, eps: f64, delta: f64, phi_x: BumpProfile, phi_v: BumpProfile) -> Result<Self> {
        if !(eps > 0.0 && delta > 0.0) {
            return Err(Error::Probe(format!("eps and delta must be positive (eps={eps}, delta={delta})")));
        }
        // keep the velocity support inside the polar cap of angle pi/3
        let y_max = delta * phi_v.outer_radius();
        if 2.0 * y_max.atan() > PI / 3.0 {
            return Err(Error::Probe(format!(
                "delta = {delta} puts the velocity support beyond polar angle pi/3"
            )));
        }
        Ok(InitialData {
            x_i,
            v_i,
            eps,
            delta,
            phi_x,
            phi_v,
            chart: StereographicChart::new(v_i),
        })
    }

    pub fn spatial_radius(&self) -> f64 {
        self.eps * self.phi_x.outer_radius()
    }

    /// Spatial factor `eps^-3 phi_x(d / eps)` at displacement `d = x - x_i`.
    #[inline]
    pub fn spatial(&self, d: Vec3) -> f64 {
        let r = d.norm();
        if r >= self.spatial_radius() {
            return 0.0;
        }
        self.phi_x.radial(r / self.eps) / (self.eps * self.eps * self.eps)
    }

    /// Velocity factor `delta^-2 phi_v(P(v)/delta) j(v)`.
    pub fn angular(&self, v: UnitVelocity) -> f64 {
        let y = match self.chart.project(v) {
            Ok(y) => y,
            Err(_) => return 0.0,
        };
        let r = y[0].hypot(y[1]) / self.delta;
        if r >= self.phi_v.outer_radius() {
            return 0.0;
        }
        let j = self.chart.jacobian_j(v).unwrap_or(0.0);
        self.phi_v.radial(r) * j / (self.delta * self.delta)
    }

    pub fn eval(&self, x: Vec3, v: UnitVelocity) -> f64 {
        let s = self.spatial(x - self.x_i);
        if s == 0.0 {
            return 0.0;
        }
        s * self.angular(v)
    }

    /// Rule for `int g(v) delta^-2 phi_v(P(v)/delta) j(v) dv`; each weight
    /// is `phi_v(w) / <v, v_i> dw` with `P(v) = delta w`, rescaled so the
    /// weights sum to [`Self::cap_mass`].
    pub fn cap_rule(&self, n_radial: usize, n_azimuth: usize) -> Vec<(Vec3, f64)> {
        let mut rule: Vec<(Vec3, f64)> = self
            .phi_v
            .disk_rule(n_radial, n_azimuth)
            .into_iter()
            .map(|(w, wt)| {
                let v = self.chart.unproject([self.delta * w[0], self.delta * w[1]]);
                (v.as_vec(), wt / v.dot(self.v_i))
            })
            .collect();
        if let Ok(m) = self.cap_mass() {
            normalize_to(&mut rule, m);
        }
        rule
    }

    /// `int delta^-2 phi_v(P(v)/delta) j(v) dv`, tending to 1 as `delta -> 0`.
    pub fn cap_mass(&self) -> Result<f64> {
        let d2 = self.delta * self.delta;
        let f = |r: f64| {
            let n = d2 * r * r;
            2.0 * PI * r * self.phi_v.radial(r) * (1.0 + n) / (1.0 - n)
        };
        let b = self.phi_v.breaks();
        let (a, _) = integrate_adaptive(f, b[0], b[1], 1e-13, 1e-16)?;
        let (c, _) = integrate_adaptive(f, b[1], b[2], 1e-13, 1e-16)?;
        Ok(a + c)
    }

    /// Total mass `int int phi dv dx`.
    pub fn total_mass(&self) -> Result<f64> {
        self.cap_mass()
    }

    /// Draws `(x_0, v_0)` from the normalized density `phi / mass`.
    pub fn sample(&self, rng: &mut impl Rng) -> (Vec3, Vec3) {
        let u = self.phi_x.sample(rng);
        let x = self.x_i + Vec3(u) * self.eps;
        (x, self.sample_velocity(rng))
    }

    /// Draws `v` from the normalized velocity factor.
    pub fn sample_velocity(&self, rng: &mut impl Rng) -> Vec3 {
        let rv = self.phi_v.outer_radius();
        let nmax = (self.delta * rv).powi(2);
        let envelope = (1.0 + nmax) / (1.0 - nmax);
        loop {
            let w = self.phi_v.sample(rng);
            let n = self.delta * self.delta * (w[0] * w[0] + w[1] * w[1]);
            let weight = (1.0 + n) / (1.0 - n);
            if rng.gen::<f64>() * envelope < weight {
                let v = self.chart.unproject([self.delta * w[0], self.delta * w[1]]);
                return v.as_vec();
            }
        }
    }
}

/// Space-time test function `prefactor * psi_x((x - centre)/scale) * psi_t((t - t_m)/eta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub center: Vec3,
    pub scale: f64,
    pub t_m: f64,
    pub eta: f64,
    pub prefactor: f64,
    pub psi_x: BumpProfile,
    pub psi_t: BumpProfile,
}

impl Window {
    #[inline]
    pub fn eval(&self, x: Vec3, t: f64) -> f64 {
        let tt = (t - self.t_m).abs() / self.eta;
        if tt >= self.psi_t.outer_radius() {
            return 0.0;
        }
        let r = (x - self.center).norm() / self.scale;
        if r >= self.psi_x.outer_radius() {
            return 0.0;
        }
        self.prefactor * self.psi_x.radial(r) * self.psi_t.radial(tt)
    }

    pub fn spatial_radius(&self) -> f64 {
        self.scale * self.psi_x.outer_radius()
    }

    pub fn time_range(&self) -> (f64, f64) {
        let h = self.eta * self.psi_t.outer_radius();
        (self.t_m - h, self.t_m + h)
    }

    /// `int int psi dx dt`.
    pub fn integral(&self) -> f64 {
        self.prefactor * self.scale.powi(3) * self.eta
    }

    /// Draws `(x, t)` from `psi / integral`.
    pub fn sample(&self, rng: &mut impl Rng) -> (Vec3, f64) {
        let u = self.psi_x.sample(rng);
        let tau = self.psi_t.sample(rng)[0];
        (self.center + Vec3(u) * self.scale, self.t_m + tau * self.eta)
    }
}

/// Probe for the damping coefficient: `psi` centred on the unscattered
/// arrival point `x_m = x_i + v_i t_m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaProbe {
    pub x_i: Vec3,
    pub v_i: UnitVelocity,
    pub t_m: f64,
    pub eps: f64,
    pub delta: f64,
    pub eta: f64,
    pub x_m: Vec3,
    pub bumps: ProbeBumps,
}

impl SigmaProbe {
    pub fn new(x_i: Vec3, v_i: UnitVelocity, t_m: f64, eps: f64, inner_ratio: f64, bumps: ProbeBumps) -> Result<Self> {
        if !(inner_ratio > 0.0 && inner_ratio < 1.0) {
            return Err(Error::config(format!("inner_ratio must lie in (0,1), got {inner_ratio}")));
        }
        SigmaProbe::with_scales(x_i, v_i, t_m, eps, inner_ratio * eps, inner_ratio * eps, bumps)
    }

    pub fn with_scales(
        x_i: Vec3,
        v_i: UnitVelocity,
        t_m: f64,
        eps: f64,
        delta: f64,
        eta: f64,
        bumps: ProbeBumps,
    ) -> Result<Self> {
        if !(t_m > 0.0 && eps > 0.0 && eta > 0.0) {
            return Err(Error::Probe(format!("need t_m, eps, eta > 0 (t_m={t_m}, eps={eps}, eta={eta})")));
        }
        if eta * bumps.psi_t.outer_radius() >= t_m {
            return Err(Error::Probe(format!("time window eta = {eta} reaches t = 0 (t_m = {t_m})")));
        }
        let p = SigmaProbe {
            x_i,
            v_i,
            t_m,
            eps,
            delta,
            eta,
            x_m: x_i + v_i.as_vec() * t_m,
            bumps,
        };
        p.initial()?;
        Ok(p)
    }

    pub fn initial(&self) -> Result<InitialData> {
        InitialData::new(self.x_i, self.v_i, self.eps, self.delta, self.bumps.phi_x, self.bumps.phi_v)
    }

    pub fn window(&self) -> Window {
        Window {
            center: self.x_m,
            scale: self.eps,
            t_m: self.t_m,
            eta: self.eta,
            prefactor: 1.0 / self.eta,
            psi_x: self.bumps.psi_x,
            psi_t: self.bumps.psi_t,
        }
    }
}

/// Probe for the tumbling kernel at `(x_i, v_hat, v_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KProbe {
    pub geometry: TumbleGeometry,
    pub eps: f64,
    pub delta: f64,
    pub eta: f64,
    pub nu: f64,
    pub alpha: f64,
    pub c_sv: f64,
    pub bumps: ProbeBumps,
}

/// `t_m = eps^alpha`, `s_hat = lambda t_m`, inner scales `inner_ratio * eps`.
pub fn build_k_probe(
    x_i: Vec3,
    v_i: UnitVelocity,
    v_hat: UnitVelocity,
    lambda: f64,
    alpha: f64,
    eps: f64,
    inner_ratio: f64,
    bumps: ProbeBumps,
) -> Result<KProbe> {
    if !(alpha > 0.75 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (3/4, 1), got {alpha}")));
    }
    if !(inner_ratio > 0.0 && inner_ratio < 1.0) {
        return Err(Error::config(format!("inner_ratio must lie in (0,1), got {inner_ratio}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::config(format!("eps must lie in (0,1), got {eps}")));
    }
    let t_m = eps.powf(alpha);
    let geometry = TumbleGeometry::forward(x_i, v_i, v_hat, lambda, t_m, DEFAULT_MIN_TUMBLE_ANGLE)?;
    let inner = inner_ratio * eps;
    if inner * bumps.psi_t.outer_radius() >= t_m {
        return Err(Error::Probe(format!("time window eta = {inner} reaches t = 0 (t_m = {t_m})")));
    }
    let p = KProbe {
        geometry,
        eps,
        delta: inner,
        eta: inner,
        nu: inner,
        alpha,
        c_sv: geometry.c_sv(),
        bumps,
    };
    p.initial()?;
    Ok(p)
}

impl KProbe {
    pub fn initial(&self) -> Result<InitialData> {
        let g = &self.geometry;
        InitialData::new(g.x_i, g.v_i, self.eps, self.delta, self.bumps.phi_x, self.bumps.phi_v)
    }

    pub fn window(&self) -> Window {
        Window {
            center: self.geometry.x_m,
            scale: self.nu,
            t_m: self.geometry.t_m,
            eta: self.eta,
            prefactor: self.c_sv / (self.nu.powi(3) * self.eta),
            psi_x: self.bumps.psi_x,
            psi_t: self.bumps.psi_t,
        }
    }

    /// `|x_m - x_o| = s_hat |v_hat - v_i|`.
    pub fn separation(&self) -> f64 {
        (self.geometry.x_m - self.geometry.x_o()).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe {
    Sigma(SigmaProbe),
    K(KProbe),
}

impl Probe {
    pub fn initial(&self) -> Result<InitialData> {
        match self {
            Probe::Sigma(p) => p.initial(),
            Probe::K(p) => p.initial(),
        }
    }

    pub fn window(&self) -> Window {
        match self {
            Probe::Sigma(p) => p.window(),
            Probe::K(p) => p.window(),
        }
    }

    pub fn eps(&self) -> f64 {
        match self {
            Probe::Sigma(p) => p.eps,
            Probe::K(p) => p.eps,
        }
    }

    pub fn t_m(&self) -> f64 {
        self.window().t_m
    }

    pub fn bumps(&self) -> ProbeBumps {
        match self {
            Probe::Sigma(p) => p.bumps,
            Probe::K(p) => p.bumps,
        }
    }

    pub fn eval_phi(&self, x: Vec3, v: UnitVelocity) -> f64 {
        self.initial().map(|d| d.eval(x, v)).unwrap_or(0.0)
    }

    pub fn eval_psi(&self, x: Vec3, t: f64) -> f64 {
        self.window().eval(x, t)
    }

    /// One-line geometry summary for reports.
    pub fn summary(&self) -> String {
        let v = |p: Vec3| format!("({:.6e}, {:.6e}, {:.6e})", p[0], p[1], p[2]);
        match self {
            Probe::Sigma(p) => format!(
                "sigma-probe x_i={} v_i={} x_m={} t_m={:.6e} eps={:.6e} delta={:.3e} eta={:.3e}",
                v(p.x_i),
                v(p.v_i.as_vec()),
                v(p.x_m),
                p.t_m,
                p.eps,
                p.delta,
                p.eta
            ),
            Probe::K(p) => {
                let g = &p.geometry;
                format!(
                    "k-probe x_i={} v_i={} v_hat={} x_m={} t_m={:.6e} s_hat={:.6e} eps={:.6e} delta=eta=nu={:.3e} alpha={} c_sv={:.6e}",
                    v(g.x_i),
                    v(g.v_i.as_vec()),
                    v(g.v_hat.as_vec()),
                    v(g.x_m),
                    g.t_m,
                    g.s_hat,
                    p.eps,
                    p.nu,
                    p.alpha,
                    p.c_sv
                )
            }
        }
    }
}
