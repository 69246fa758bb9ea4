use ktlab_core::geometry::UnitVelocity;
use ktlab_core::probe::{c_phipsi, BumpProfile, InitialData, ProbeBumps, SigmaProbe, DEFAULT_C_PHIPSI};
use ktlab_core::Vec3;
use proptest::prelude::*;
use std::f64::consts::PI;

/// Composite Simpson on `[a, b]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn sphere_measure(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 4.0 * PI,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bump_has_unit_integral_and_unit_peak(d in 1usize..=3, kappa in 0.4f64..0.95) {
        let b = BumpProfile::new(d, kappa).unwrap();
        let r = b.outer_radius();
        prop_assert!(r <= 1.0);
        let integral = sphere_measure(d) * simpson(|q| b.radial(q) * q.powi(d as i32 - 1), 0.0, r, 20_000);
        prop_assert!((integral - 1.0).abs() < 1e-9, "integral {integral}");
        prop_assert_eq!(b.radial(0.0), 1.0);
        prop_assert_eq!(b.radial(b.plateau_radius()), 1.0);
        prop_assert_eq!(b.radial(r), 0.0);
        prop_assert_eq!(b.radial(1.5 * r), 0.0);
    }

    #[test]
    fn bump_is_bounded_and_monotone(kappa in 0.4f64..0.95, q1 in 0.0f64..1.2, q2 in 0.0f64..1.2) {
        let b = BumpProfile::new(3, kappa).unwrap();
        let (lo, hi) = if q1 < q2 { (q1, q2) } else { (q2, q1) };
        let (a, c) = (b.radial(lo), b.radial(hi));
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&c));
        prop_assert!(c <= a);
    }

    #[test]
    fn bump_rules_integrate_constants_exactly(kappa in 0.4f64..0.95, n in 2usize..8) {
        let b3 = BumpProfile::new(3, kappa).unwrap();
        let b2 = BumpProfile::new(2, kappa).unwrap();
        let b1 = BumpProfile::new(1, kappa).unwrap();
        let s3: f64 = b3.ball_rule(n, n, 2 * n).iter().map(|p| p.1).sum();
        let s2: f64 = b2.disk_rule(n, 2 * n).iter().map(|p| p.1).sum();
        let s1: f64 = b1.line_rule(n).iter().map(|p| p.1).sum();
        prop_assert!((s3 - 1.0).abs() < 1e-13 && (s2 - 1.0).abs() < 1e-13 && (s1 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn initial_data_vanishes_off_support(
        dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0, theta in 0.0f64..PI, phi in 0.0f64..6.28,
    ) {
        let b = ProbeBumps::standard();
        let data = InitialData::new(Vec3::ZERO, UnitVelocity::e3(), 0.1, 0.05, b.phi_x, b.phi_v).unwrap();
        let x = Vec3::new(dx, dy, dz) * 0.2;
        let v = UnitVelocity::new(Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())).unwrap();
        let val = data.eval(x, v);
        prop_assert!(val >= 0.0);
        if x.norm() >= data.spatial_radius() {
            prop_assert_eq!(val, 0.0);
        }
        // stereographic radius tan(theta/2) beyond delta * R
        if (theta / 2.0).tan() >= 0.05 * b.phi_v.outer_radius() {
            prop_assert_eq!(val, 0.0);
        }
    }
}

#[test]
fn plateau_fraction_too_small_is_rejected() {
    assert!(BumpProfile::new(3, 0.05).is_err());
    assert!(BumpProfile::new(4, 0.5).is_err());
    assert!(BumpProfile::new(3, 1.0).is_err());
}

#[test]
fn c_phipsi_matches_radial_quadrature() {
    let b = ProbeBumps::standard();
    let r = b.phi_x.outer_radius();
    let oracle = simpson(|q| 4.0 * PI * q * q * b.phi_x.radial(q) * b.psi_x.radial(q), 0.0, r, 40_000);
    let got = c_phipsi(&b.phi_x, &b.psi_x).unwrap();
    assert!((got - oracle).abs() < 1e-10);
    assert!((got - DEFAULT_C_PHIPSI).abs() < 1e-12);
}

/// `int delta^-2 phi_v(P(v)/delta) j(v) dv` by Simpson in the polar angle
/// around `v_i`, using only point evaluations of the initial data.
fn mass_by_polar_angle(data: &InitialData) -> f64 {
    let theta_max = 2.0 * (data.delta * data.phi_v.outer_radius()).atan();
    let v_i = data.v_i.as_vec();
    let side = Vec3::new(1.0, 0.0, 0.0);
    simpson(
        |th| {
            let v = UnitVelocity::new(v_i * th.cos() + side * th.sin()).unwrap();
            2.0 * PI * th.sin() * data.angular(v)
        },
        0.0,
        theta_max,
        20_000,
    )
}

#[test]
fn velocity_mass_tends_to_one() {
    let b = ProbeBumps::standard();
    let mut prev = f64::INFINITY;
    for delta in [0.2, 0.1, 0.05, 0.025] {
        let data = InitialData::new(Vec3::ZERO, UnitVelocity::e3(), 0.1, delta, b.phi_x, b.phi_v).unwrap();
        let m = data.total_mass().unwrap();
        let oracle = mass_by_polar_angle(&data);
        assert!((m - oracle).abs() < 1e-9 * oracle, "delta {delta}: {m} vs {oracle}");
        let dev = (m - 1.0).abs();
        assert!(dev < prev, "delta {delta}: |m - 1| = {dev} did not shrink");
        assert!(dev < 2.0 * delta * delta, "delta {delta}: |m - 1| = {dev}");
        prev = dev;
    }
}

#[test]
fn cap_rule_sums_to_cap_mass() {
    let b = ProbeBumps::standard();
    let data = InitialData::new(Vec3::ZERO, UnitVelocity::e2(), 0.1, 0.1, b.phi_x, b.phi_v).unwrap();
    let s: f64 = data.cap_rule(4, 8).iter().map(|p| p.1).sum();
    assert!((s - data.cap_mass().unwrap()).abs() < 1e-13);
}

#[test]
fn wide_velocity_cap_is_rejected() {
    let b = ProbeBumps::standard();
    assert!(InitialData::new(Vec3::ZERO, UnitVelocity::e3(), 0.1, 0.9, b.phi_x, b.phi_v).is_err());
}

#[test]
fn sigma_window_is_centred_on_the_arrival_point() {
    let p = SigmaProbe::new(Vec3::new(1.0, 0.0, 0.0), UnitVelocity::e2(), 0.5, 0.1, 0.1, ProbeBumps::standard()).unwrap();
    let w = p.window();
    assert!((w.center - Vec3::new(1.0, 0.5, 0.0)).norm() < 1e-15);
    assert!((w.integral() - 1e-3).abs() < 1e-18);
    let (t0, t1) = w.time_range();
    assert!(t0 > 0.0 && t1 < 1.0);
    assert!(SigmaProbe::new(Vec3::ZERO, UnitVelocity::e2(), 0.001, 0.1, 0.5, ProbeBumps::standard()).is_err());
}
