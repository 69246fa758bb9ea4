//! Geometry of the velocity sphere: stereographic charts, sphere quadrature,
//! the scattering change of variables `z = s (v - a)` and the tumble-point
//! construction.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussRule;
use crate::vec3::Vec3;

/// Surface measure of the unit sphere.
pub const SPHERE_AREA: f64 = 4.0 * PI;

const ANTIPODE_GUARD_RAD: f64 = 1e-6;
const EQUATOR_GUARD: f64 = 1e-9;
pub const DEFAULT_MIN_TUMBLE_ANGLE: f64 = 0.1;

/// A point of the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitVelocity(Vec3);

impl UnitVelocity {
    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn new(v: Vec3) -> Result<Self> {
        v.normalized()
            .map(UnitVelocity)
            .ok_or_else(|| Error::geometry(format!("cannot normalize velocity {:?}", v.0)))
    }

    /// Wraps a vector already known to be unit (renormalizes to kill drift).
    pub(crate) fn from_unit(v: Vec3) -> Self {
        let n = v.norm();
        UnitVelocity(v / n)
    }

    pub fn e1() -> Self {
        UnitVelocity(Vec3::E1)
    }

    pub fn e2() -> Self {
        UnitVelocity(Vec3::E2)
    }

    pub fn e3() -> Self {
        UnitVelocity(Vec3::E3)
    }

    #[inline]
    pub fn as_vec(self) -> Vec3 {
        self.0
    }

    #[inline]
    pub fn dot(self, other: UnitVelocity) -> f64 {
        self.0.dot(other.0)
    }

    /// Angle to `other`, in radians.
    pub fn angle_to(self, other: UnitVelocity) -> f64 {
        // atan2 form stays accurate near 0 and pi
        let c = self.0.dot(other.0);
        let s = self.0.cross(other.0).norm();
        s.atan2(c)
    }
}

impl TryFrom<[f64; 3]> for UnitVelocity {
    type Error = Error;
    fn try_from(a: [f64; 3]) -> Result<Self> {
        UnitVelocity::new(Vec3(a))
    }
}

impl From<UnitVelocity> for [f64; 3] {
    fn from(u: UnitVelocity) -> [f64; 3] {
        u.0 .0
    }
}

impl From<UnitVelocity> for Vec3 {
    fn from(u: UnitVelocity) -> Vec3 {
        u.0
    }
}

/// Orthonormal frame `(f1, f2, anchor)`; `f1` is the anchor crossed with the
/// coordinate axis of its smallest-magnitude component.
pub(crate) fn tangent_frame(a: Vec3) -> (Vec3, Vec3) {
    let mut k = 0;
    for i in 1..3 {
        if a[i].abs() < a[k].abs() {
            k = i;
        }
    }
    let mut axis = [0.0; 3];
    axis[k] = 1.0;
    let f1 = a.cross(Vec3(axis));
    let f1 = f1 / f1.norm();
    let f2 = a.cross(f1);
    (f1, f2 / f2.norm())
}

/// Stereographic chart centred on `anchor`, singular at `-anchor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereographicChart {
    anchor: UnitVelocity,
    f1: Vec3,
    f2: Vec3,
}

impl StereographicChart {
    pub fn new(anchor: UnitVelocity) -> Self {
        let (f1, f2) = tangent_frame(anchor.as_vec());
        StereographicChart { anchor, f1, f2 }
    }

    pub fn anchor(&self) -> UnitVelocity {
        self.anchor
    }

    pub fn frame(&self) -> (Vec3, Vec3) {
        (self.f1, self.f2)
    }

    /// `y = (<v,f1>, <v,f2>) / (1 + <v,anchor>)`.
    pub fn project(&self, v: UnitVelocity) -> Result<[f64; 2]> {
        let a = self.anchor.as_vec();
        let vv = v.as_vec();
        let back = (vv + a).norm();
        if back < ANTIPODE_GUARD_RAD {
            return Err(Error::domain(format!(
                "velocity {:?} is antipodal to chart anchor {:?}",
                vv.0, a.0
            )));
        }
        let den = 1.0 + vv.dot(a);
        Ok([vv.dot(self.f1) / den, vv.dot(self.f2) / den])
    }

    pub fn unproject(&self, y: [f64; 2]) -> UnitVelocity {
        let n = y[0] * y[0] + y[1] * y[1];
        let inv = 1.0 / (1.0 + n);
        let v = self.anchor.as_vec() * ((1.0 - n) * inv)
            + self.f1 * (2.0 * y[0] * inv)
            + self.f2 * (2.0 * y[1] * inv);
        UnitVelocity::from_unit(v)
    }

    /// Area element `dv = area_element(y) dy` of this chart.
    pub fn area_element(y: [f64; 2]) -> f64 {
        let n = y[0] * y[0] + y[1] * y[1];
        4.0 / ((1.0 + n) * (1.0 + n))
    }

    /// `j(v) = 1 / ((1 + c)^2 |c|)` with `c = <v, anchor>`.
    pub fn jacobian_j(&self, v: UnitVelocity) -> Result<f64> {
        let a = self.anchor.as_vec();
        let vv = v.as_vec();
        if (vv + a).norm() < ANTIPODE_GUARD_RAD {
            return Err(Error::domain(format!(
                "jacobian_j: velocity antipodal to chart anchor {:?}",
                a.0
            )));
        }
        let c = vv.dot(a);
        if c.abs() < EQUATOR_GUARD {
            return Err(Error::domain(format!(
                "jacobian_j: velocity on the equator of chart anchor {:?}",
                a.0
            )));
        }
        Ok(1.0 / ((1.0 + c) * (1.0 + c) * c.abs()))
    }
}

/// Weighted point set on (part of) the unit sphere.
#[derive(Debug, Clone, Default)]
pub struct SphereRule {
    pub points: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec3, f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn integrate(&self, mut f: impl FnMut(Vec3) -> f64) -> f64 {
        self.iter().map(|(v, w)| w * f(v)).sum()
    }

    /// Product rule about `axis`: Gauss–Legendre in the polar cosine over
    /// each `(lo, hi)` panel, `n_azimuth` uniform azimuths.
    pub fn polar_panels(axis: Vec3, cos_panels: &[(f64, f64)], n_polar: usize, n_azimuth: usize) -> SphereRule {
        let (f1, f2) = tangent_frame(axis);
        let gauss = GaussRule::new(n_polar);
        let dphi = 2.0 * PI / n_azimuth as f64;
        let mut rule = SphereRule::default();
        for &(lo, hi) in cos_panels {
            if hi <= lo {
                continue;
            }
            for (u, wu) in gauss.mapped(lo, hi) {
                let st = (1.0 - u * u).max(0.0).sqrt();
                for k in 0..n_azimuth {
                    let phi = (k as f64 + 0.5) * dphi;
                    let p = axis * u + f1 * (st * phi.cos()) + f2 * (st * phi.sin());
                    rule.points.push(p);
                    rule.weights.push(wu * dphi);
                }
            }
        }
        rule
    }
}

/// Full-sphere product rule: `order` Gauss nodes in `cos(theta)` times
/// `2 * order` azimuths.
pub fn sphere_quadrature(order: usize) -> Result<SphereRule> {
    if order < 2 {
        return Err(Error::config(format!("sphere quadrature order must be >= 2, got {order}")));
    }
    Ok(SphereRule::polar_panels(Vec3::E3, &[(-1.0, 1.0)], order, 2 * order))
}

/// `(s, v)` and its image `z = s (v - anchor)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterCoordinates {
    pub s: f64,
    pub v: UnitVelocity,
    pub z: Vec3,
}

impl ScatterCoordinates {
    pub fn from_sv(s: f64, v: UnitVelocity, anchor: UnitVelocity) -> Self {
        ScatterCoordinates {
            s,
            v,
            z: scatter(s, v, anchor),
        }
    }

    pub fn from_z(anchor: UnitVelocity, z: Vec3) -> Result<Self> {
        let (s, v) = zeta_omega(anchor, z)?;
        Ok(ScatterCoordinates { s, v, z })
    }
}

/// Forward scattering map `(s, v) -> s (v - anchor)`.
#[inline]
pub fn scatter(s: f64, v: UnitVelocity, anchor: UnitVelocity) -> Vec3 {
    (v.as_vec() - anchor.as_vec()) * s
}

/// Inverse of [`scatter`]: `zeta = |z|^2 / (2 |<z,a>|)`, `omega = a + z / zeta`.
///
/// Only the half-space `<z, a> < 0` is the image of the forward map; other
/// inputs are rejected.
pub fn zeta_omega(anchor: UnitVelocity, z: Vec3) -> Result<(f64, UnitVelocity)> {
    let zn = z.norm();
    if zn == 0.0 || !zn.is_finite() {
        return Err(Error::domain("zeta_omega: z must be nonzero and finite"));
    }
    let za = z.dot(anchor.as_vec());
    if za.abs() <= 1e-12 * zn {
        return Err(Error::domain("zeta_omega: z is orthogonal to the anchor"));
    }
    if za > 0.0 {
        return Err(Error::domain(
            "zeta_omega: z lies in the half-space <z, anchor> > 0, outside the image of the scattering map",
        ));
    }
    let zeta = zn * zn / (2.0 * za.abs());
    let omega = anchor.as_vec() + z / zeta;
    Ok((zeta, UnitVelocity::from_unit(omega)))
}

/// Jacobian determinant `s^2 (1 - <v, anchor>)` of the scattering map.
pub fn jacobian_s(s: f64, v: UnitVelocity, anchor: UnitVelocity) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::domain(format!("jacobian_s: s must be positive, got {s}")));
    }
    let g = 1.0 - v.dot(anchor);
    if g <= 1e-15 {
        return Err(Error::geometry("jacobian_s: zero Jacobian at v = anchor"));
    }
    Ok(s * s * g)
}

/// Once-scattered path from `(x_i, v_i)` reaching `x_m` at time `t_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TumbleGeometry {
    pub x_i: Vec3,
    pub v_i: UnitVelocity,
    pub x_m: Vec3,
    pub t_m: f64,
    pub s_hat: f64,
    pub v_hat: UnitVelocity,
    pub lambda: f64,
}

impl TumbleGeometry {
    /// Builds `x_m = x_i + s_hat v_hat + (t_m - s_hat) v_i` with `s_hat = lambda t_m`.
    pub fn forward(
        x_i: Vec3,
        v_i: UnitVelocity,
        v_hat: UnitVelocity,
        lambda: f64,
        t_m: f64,
        min_angle: f64,
    ) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::geometry(format!("lambda must lie in (0,1), got {lambda}")));
        }
        if !(t_m > 0.0) {
            return Err(Error::geometry(format!("t_m must be positive, got {t_m}")));
        }
        let ang = v_hat.angle_to(v_i);
        if ang < min_angle {
            return Err(Error::geometry(format!(
                "v_hat is {ang:.4} rad from v_i, below the minimum {min_angle}"
            )));
        }
        let s_hat = lambda * t_m;
        let x_m = x_i + v_hat.as_vec() * s_hat + v_i.as_vec() * (t_m - s_hat);
        Ok(TumbleGeometry {
            x_i,
            v_i,
            x_m,
            t_m,
            s_hat,
            v_hat,
            lambda,
        })
    }

    /// Unscattered arrival point `x_i + v_i t_m`.
    pub fn x_o(&self) -> Vec3 {
        self.x_i + self.v_i.as_vec() * self.t_m
    }

    /// Tumble location `x_i + v_i (t_m - s_hat)`.
    pub fn tumble_point(&self) -> Vec3 {
        self.x_i + self.v_i.as_vec() * (self.t_m - self.s_hat)
    }

    /// `s_hat^2 (1 - <v_i, v_hat>)`.
    pub fn c_sv(&self) -> f64 {
        self.s_hat * self.s_hat * (1.0 - self.v_i.dot(self.v_hat))
    }
}

pub fn solve_tumble_point(x_i: Vec3, v_i: UnitVelocity, x_m: Vec3, t_m: f64) -> Result<TumbleGeometry> {
    solve_tumble_point_with(x_i, v_i, x_m, t_m, DEFAULT_MIN_TUMBLE_ANGLE)
}

pub fn solve_tumble_point_with(
    x_i: Vec3,
    v_i: UnitVelocity,
    x_m: Vec3,
    t_m: f64,
    min_angle: f64,
) -> Result<TumbleGeometry> {
    if !(t_m > 0.0) {
        return Err(Error::geometry(format!("t_m must be positive, got {t_m}")));
    }
    let d = x_m - x_i;
    let dn = d.norm();
    if dn >= t_m {
        return Err(Error::geometry(format!(
            "x_m is {dn} from x_i, not reachable within t_m = {t_m}"
        )));
    }
    let vi = v_i.as_vec();
    let along = d.dot(vi);
    if d.cross(vi).norm() <= 1e-9 * t_m && along >= 0.0 {
        return Err(Error::geometry("x_m lies on the unscattered ray x_i + v_i [0, t_m]"));
    }
    let tau = (t_m * t_m - dn * dn) / (2.0 * (t_m - along));
    let s_hat = t_m - tau;
    if !(s_hat > 0.0) {
        return Err(Error::geometry("degenerate tumble geometry (s_hat <= 0)"));
    }
    let v_hat = UnitVelocity::new((d - vi * tau) / s_hat)?;
    let ang = v_hat.angle_to(v_i);
    if ang < min_angle {
        return Err(Error::geometry(format!(
            "recovered v_hat is {ang:.4} rad from v_i, below the minimum {min_angle}"
        )));
    }
    Ok(TumbleGeometry {
        x_i,
        v_i,
        x_m,
        t_m,
        s_hat,
        v_hat,
        lambda: s_hat / t_m,
    })
}

/// `(c1, c2) = (|x_m - x_o| / 4, |x_m - x_o|^2 / (8 t_m^2))`.
pub fn domain_thresholds(x_m: Vec3, x_o: Vec3, t_m: f64) -> Result<(f64, f64)> {
    let d = (x_m - x_o).norm();
    if d == 0.0 {
        return Err(Error::domain("domain_thresholds: x_m coincides with x_o"));
    }
    if !(t_m > 0.0) {
        return Err(Error::domain("domain_thresholds: t_m must be positive"));
    }
    Ok((d / 4.0, d * d / (8.0 * t_m * t_m)))
}
