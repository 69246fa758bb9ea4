use ktlab_core::fields::{FieldSpec, KernelField, ModelConfig};
use ktlab_core::geometry::{sphere_quadrature, UnitVelocity};
use ktlab_core::measurement::{
    measure, measure_order0_with, measure_particle, measure_probe, trajectory_average, Method,
};
use ktlab_core::particles::simulate_particles;
use ktlab_core::probe::{build_k_probe, InitialData, Probe, ProbeBumps, SigmaProbe, DEFAULT_C_PHIPSI};
use ktlab_core::quadrature::GaussRule;
use ktlab_core::solver::{CollisionEvaluator, QuadratureSpec};
use ktlab_core::Vec3;
use proptest::prelude::*;
use std::f64::consts::PI;

fn constant(k0: f64, horizon: f64) -> ModelConfig {
    ModelConfig::derived(KernelField::builtin(&FieldSpec::Constant { value: k0 }).unwrap(), horizon)
}

fn sigma_probe(eps: f64) -> Probe {
    Probe::Sigma(SigmaProbe::new(Vec3::ZERO, UnitVelocity::e1(), 0.5, eps, eps, ProbeBumps::standard()).unwrap())
}

fn k_probe(eps: f64, inner: f64) -> Probe {
    Probe::K(
        build_k_probe(Vec3::ZERO, UnitVelocity::e1(), UnitVelocity::e2(), 0.5, 0.9, eps, inner, ProbeBumps::standard())
            .unwrap(),
    )
}

fn blob(x: Vec3, v: UnitVelocity) -> InitialData {
    let b = ProbeBumps::standard();
    InitialData::new(x, v, 0.1, 0.1, b.phi_x, b.phi_v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn measurement_is_linear_in_the_initial_data(a in 0.0f64..3.0, b in 0.0f64..3.0, dy in -0.1f64..0.1) {
        let model = constant(0.02, 1.0);
        let window = sigma_probe(0.1).window();
        let rule = QuadratureSpec::default().window;
        let sphere = sphere_quadrature(24).unwrap();
        let p1 = blob(Vec3::ZERO, UnitVelocity::e1());
        let p2 = blob(Vec3::new(0.0, dy, 0.0), UnitVelocity::new(Vec3::new(0.99, 0.141, 0.0)).unwrap());
        let m1 = measure_order0_with(&model, |x, v| p1.eval(x, UnitVelocity::new(v).unwrap()), &window, rule, &sphere).unwrap();
        let m2 = measure_order0_with(&model, |x, v| p2.eval(x, UnitVelocity::new(v).unwrap()), &window, rule, &sphere).unwrap();
        let mix = measure_order0_with(
            &model,
            |x, v| {
                let v = UnitVelocity::new(v).unwrap();
                a * p1.eval(x, v) + b * p2.eval(x, v)
            },
            &window,
            rule,
            &sphere,
        )
        .unwrap();
        let want = a * m1 + b * m2;
        prop_assert!((mix - want).abs() <= 1e-12 * (1.0 + want.abs()), "{mix} vs {want}");
    }
}

#[test]
fn per_order_values_sum_to_total_and_are_nonnegative() {
    let m = measure_probe(&constant(0.02, 1.0), &sigma_probe(0.2), QuadratureSpec::default(), 3, 3).unwrap();
    assert_eq!(m.method, Method::Series);
    assert_eq!(m.depth(), 3);
    let sum: f64 = m.per_order.iter().map(|o| o.value).sum();
    assert!((sum - m.total).abs() <= 1e-14 * m.total);
    assert!(m.per_order.iter().all(|o| o.value >= 0.0 && o.error >= 0.0));
    let tail = m.tail_estimate.unwrap();
    assert!(tail.value <= m.tail_bound + 3.0 * tail.error);
}

#[test]
fn series_and_particles_agree_up_to_the_tail() {
    // sigma = 0.3: the truncated series misses at most the remainder bound
    let model = constant(0.3 / (4.0 * PI), 1.0);
    let probe = sigma_probe(0.2);
    let ens = simulate_particles(&model, &probe.initial().unwrap(), 200_000, 21).unwrap();
    let part = measure_particle(&ens, &probe).unwrap();
    assert_eq!(part.method, Method::Particle);
    for n in 1..=3 {
        let series = measure_probe(&model, &probe, QuadratureSpec::default(), 21, n).unwrap();
        let combined = (part.error.powi(2) + series.error.powi(2)).sqrt();
        let gap = part.total - series.total;
        assert!(gap <= series.tail_bound + 3.0 * combined, "N = {n}: gap {gap}, bound {}", series.tail_bound);
        assert!(gap >= -3.0 * combined, "N = {n}: series exceeds particles by {}", -gap);
    }
}

#[test]
fn total_order0_mass_decays_exponentially() {
    let sigma0 = 0.3;
    let model = constant(sigma0 / (4.0 * PI), 1.0);
    let b = ProbeBumps::standard();
    let src = InitialData::new(Vec3::ZERO, UnitVelocity::e1(), 0.2, 0.05, b.phi_x, b.phi_v).unwrap();
    let ev = CollisionEvaluator::new(model, src, QuadratureSpec::default(), 1).unwrap();
    let (radial, polar) = (GaussRule::new(48), GaussRule::new(48));
    let n_az = 96;
    for t in [0.2, 0.5, 0.9] {
        // the support of rho_0 lies in a ball around the transported centre
        let centre = Vec3::E1 * t;
        let r_max = src.spatial_radius() + 2.0 * t * (src.delta * src.phi_v.outer_radius()).atan();
        let mut total = 0.0;
        for (r, wr) in radial.mapped(0.0, r_max) {
            for (c, wc) in polar.mapped(-1.0, 1.0) {
                let s = (1.0 - c * c).sqrt();
                for k in 0..n_az {
                    let p = 2.0 * PI * (k as f64 + 0.5) / n_az as f64;
                    let x = centre + Vec3::new(c, s * p.cos(), s * p.sin()) * r;
                    total += wr * wc * r * r * (2.0 * PI / n_az as f64) * ev.rho0(x, t).unwrap();
                }
            }
        }
        let want = (-sigma0 * t).exp() * ev.cap_mass();
        assert!((total - want).abs() < 1e-6 * want, "t = {t}: {total} vs {want}");
    }
}

/// `int rho_order dx` in spherical coordinates around the source, polar
/// angle measured from `v_i` (the once-scattered density has a
/// `1/distance` singularity along the unscattered ray).
fn scattered_mass(ev: &CollisionEvaluator, t: f64, order: usize, n: usize, n_az: usize) -> f64 {
    let src = ev.source();
    let g = GaussRule::new(n);
    let e = src.spatial_radius();
    let r_breaks = [0.0, (t - e).max(0.0), t + e];
    let th_breaks = [0.0, 0.05, 0.3, 1.0, PI];
    let mut total = 0.0;
    for rw in r_breaks.windows(2) {
        for (r, wr) in g.mapped(rw[0], rw[1]) {
            for tw in th_breaks.windows(2) {
                for (th, wt) in g.mapped(tw[0], tw[1]) {
                    for k in 0..n_az {
                        let p = 2.0 * PI * (k as f64 + 0.5) / n_az as f64;
                        let x = Vec3::new(th.cos(), th.sin() * p.cos(), th.sin() * p.sin()) * r;
                        let rho = ev.eval_rho(order, x, t).unwrap().0;
                        total += wr * wt * r * r * th.sin() * (2.0 * PI / n_az as f64) * rho;
                    }
                }
            }
        }
    }
    total
}

#[test]
fn series_mass_is_conserved() {
    let model = constant(0.02, 1.0);
    let b = ProbeBumps::standard();
    let src = InitialData::new(Vec3::ZERO, UnitVelocity::e1(), 0.2, 0.05, b.phi_x, b.phi_v).unwrap();
    let spec = QuadratureSpec { mc_samples: 128, ..QuadratureSpec::default().refined(-1) };
    let ev = CollisionEvaluator::new(model, src, spec, 8).unwrap();
    let mass = ev.cap_mass();
    let g = GaussRule::new(24);
    let mut totals = Vec::new();
    for t in [0.3, 0.8] {
        let r0 = src.spatial_radius() + 2.0 * t * (src.delta * src.phi_v.outer_radius()).atan();
        let mut m0 = 0.0;
        for (r, wr) in g.mapped(0.0, r0) {
            for (c, wc) in g.mapped(-1.0, 1.0) {
                for k in 0..48 {
                    let p = 2.0 * PI * (k as f64 + 0.5) / 48.0;
                    let s = (1.0 - c * c).sqrt();
                    let x = Vec3::E1 * t + Vec3::new(c, s * p.cos(), s * p.sin()) * r;
                    m0 += wr * wc * r * r * (2.0 * PI / 48.0) * ev.rho0(x, t).unwrap();
                }
            }
        }
        let (m1, m2) = (scattered_mass(&ev, t, 1, 16, 4), scattered_mass(&ev, t, 2, 8, 2));
        totals.push(m0 + m1 + m2);
    }
    for m in &totals {
        assert!((m / mass - 1.0).abs() < 0.01, "mass {m} vs {mass}");
    }
    assert!((totals[0] - totals[1]).abs() < 0.01 * mass, "{totals:?}");
}

#[test]
fn free_k_probe_order0_vanishes_along_the_ladder() {
    let model = ModelConfig::derived(KernelField::builtin(&FieldSpec::Zero).unwrap(), 1.0);
    let mut values = Vec::new();
    for eps in [0.1, 0.01, 1e-3] {
        let m = measure_probe(&model, &k_probe(eps, eps), QuadratureSpec::default(), 1, 1).unwrap();
        values.push(m.order_value(0));
    }
    assert!(values.windows(2).all(|w| w[1] <= w[0]), "{values:?}");
    assert!(values[2] < 1e-3 * DEFAULT_C_PHIPSI, "{values:?}");
}

#[test]
fn free_sigma_probe_approaches_c_phipsi() {
    let model = ModelConfig::derived(KernelField::builtin(&FieldSpec::Zero).unwrap(), 1.0);
    let dev: Vec<f64> = [0.2, 0.1, 0.05]
        .iter()
        .map(|&eps| {
            let m = measure_probe(&model, &sigma_probe(eps), QuadratureSpec::default(), 1, 1).unwrap();
            (m.total / DEFAULT_C_PHIPSI - 1.0).abs()
        })
        .collect();
    assert!(dev[0] > dev[1] && dev[1] > dev[2], "{dev:?}");
}

#[test]
fn unit_window_trajectory_average_is_mass_times_horizon() {
    let model = constant(0.05, 0.8);
    let src = blob(Vec3::ZERO, UnitVelocity::e3());
    let ens = simulate_particles(&model, &src, 5_000, 3).unwrap();
    let (est, se) = trajectory_average(&ens, |_, _| 1.0, 4);
    assert!((est - ens.mass * 0.8).abs() < 1e-12, "{est}");
    assert!(se < 1e-12);
}

#[test]
fn free_particles_miss_the_k_window() {
    let model = ModelConfig::derived(KernelField::builtin(&FieldSpec::Zero).unwrap(), 1.0);
    let probe = k_probe(1e-3, 1e-3);
    let ens = simulate_particles(&model, &probe.initial().unwrap(), 20_000, 5).unwrap();
    let m = measure_particle(&ens, &probe).unwrap();
    assert_eq!(m.total, 0.0);
}

#[test]
fn evaluator_must_match_the_probe() {
    let model = constant(0.02, 1.0);
    let ev = CollisionEvaluator::new(model, blob(Vec3::ZERO, UnitVelocity::e1()), QuadratureSpec::default(), 1).unwrap();
    assert!(measure(&ev, &sigma_probe(0.1), 1).is_err());
}
