//! The macroscopic observable `M = int_0^T int rho(x, t) psi(x, t) dx dt`,
//! split by collision order.
//!
//! Orders 0 and 1 are tensor quadratures over `supp psi`; orders `>= 2` and
//! the tail beyond the series depth are Monte Carlo. The particle path
//! averages `int psi(X_t, t) dt` over simulated trajectories and splits it by
//! jump count, which gives an independent per-order decomposition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{line_integral_sigma, ModelConfig};
use crate::geometry::{SphereRule, SPHERE_AREA};
use crate::particles::ParticleEnsemble;
use crate::probe::{KProbe, Probe, Window};
use crate::quadrature::GaussRule;
use crate::solver::{chord, remainder_bound, CollisionEvaluator, WindowRule};
use crate::vec3::Vec3;

/// Orders past the series depth that are sampled for the tail estimate.
pub const TAIL_EXTRA_ORDERS: usize = 2;

const SEGMENT_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Series,
    Particle,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Series => "series",
            Method::Particle => "particle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderValue {
    pub order: usize,
    pub value: f64,
    /// Quadrature (`|fine - coarse|`) or statistical (one standard error).
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementResult {
    pub method: Method,
    /// Sum of `per_order` values.
    pub total: f64,
    /// Combined error of `total`.
    pub error: f64,
    pub per_order: Vec<OrderValue>,
    /// Analytic bound on the measured part of orders past the series depth.
    pub tail_bound: f64,
    /// Sampled value of orders `N+1 ..= N+TAIL_EXTRA_ORDERS`, when computed.
    pub tail_estimate: Option<OrderValue>,
    pub cap_mass: f64,
    pub window_integral: f64,
    pub probe: String,
}

impl MeasurementResult {
    pub fn order(&self, n: usize) -> Option<OrderValue> {
        self.per_order.iter().copied().find(|o| o.order == n)
    }

    pub fn order_value(&self, n: usize) -> f64 {
        self.order(n).map_or(0.0, |o| o.value)
    }

    /// Sum of orders `>= n` with its combined error.
    pub fn from_order(&self, n: usize) -> (f64, f64) {
        let it = self.per_order.iter().filter(|o| o.order >= n);
        let v = it.clone().map(|o| o.value).sum();
        let e = it.map(|o| o.error * o.error).sum::<f64>().sqrt();
        (v, e)
    }

    /// Series depth `N` (highest order carried).
    pub fn depth(&self) -> usize {
        self.per_order.iter().map(|o| o.order).max().unwrap_or(0)
    }
}

/// Space-time quadrature nodes `(x, t, weight)` of `window`, weights
/// including `psi`, so that `sum weight = int int psi`.
pub fn window_nodes(window: &Window, rule: WindowRule) -> Vec<(Vec3, f64, f64)> {
    let space = window.psi_x.ball_rule(rule.radial, rule.polar, rule.azimuth);
    let time = window.psi_t.line_rule(rule.time);
    let scale = window.prefactor * window.scale.powi(3) * window.eta;
    let mut out = Vec::with_capacity(space.len() * time.len());
    for &(tau, wt) in &time {
        let t = window.t_m + window.eta * tau;
        for &(p, wx) in &space {
            out.push((window.center + p * window.scale, t, scale * wx * wt));
        }
    }
    out
}

/// `int int rho psi` for an arbitrary density field.
pub fn measure_density(rho: impl Fn(Vec3, f64) -> f64 + Sync, window: &Window, rule: WindowRule) -> f64 {
    let nodes = window_nodes(window, rule);
    let parts: Vec<f64> = nodes.par_iter().map(|&(x, t, w)| w * rho(x, t)).collect();
    parts.iter().sum()
}

/// Order-0 measurement for arbitrary initial data `phi(x, v)`, by the full
/// sphere rule in velocity. Used where the probe cap structure is absent.
pub fn measure_order0_with(
    model: &ModelConfig,
    phi: impl Fn(Vec3, Vec3) -> f64 + Sync,
    window: &Window,
    rule: WindowRule,
    sphere: &SphereRule,
) -> Result<f64> {
    let nodes = window_nodes(window, rule);
    let parts: Vec<Result<f64>> = nodes
        .par_iter()
        .map(|&(x, t, w)| {
            let mut acc = 0.0;
            for (v, wv) in sphere.iter() {
                let p = phi(x - v * t, v);
                if p == 0.0 {
                    continue;
                }
                acc += wv * p * (-line_integral_sigma(&model.sigma, x, v, t)?).exp();
            }
            Ok(w * acc)
        })
        .collect();
    sum_results(parts)
}

fn sum_results(parts: Vec<Result<f64>>) -> Result<f64> {
    let mut s = 0.0;
    for p in parts {
        s += p?;
    }
    Ok(s)
}

fn check_window(window: &Window, horizon: f64) -> Result<()> {
    let (lo, hi) = window.time_range();
    if lo <= 0.0 || hi > horizon {
        return Err(Error::Probe(format!(
            "time window [{lo:.6e}, {hi:.6e}] must lie inside (0, T = {horizon}]"
        )));
    }
    Ok(())
}

fn order0(ev: &CollisionEvaluator, window: &Window) -> Result<f64> {
    let nodes = window_nodes(window, ev.spec().window);
    let cap = ev.cap_rule0();
    let parts: Vec<Result<f64>> = nodes.par_iter().map(|&(x, t, w)| Ok(w * ev.rho0_with(x, t, cap)?)).collect();
    sum_results(parts)
}

fn order1(ev: &CollisionEvaluator, window: &Window) -> Result<f64> {
    if ev.model().kernel.is_zero() {
        return Ok(0.0);
    }
    let nodes = window_nodes(window, ev.spec().window1);
    let (cap, z) = (ev.cap_rule1(), ev.z_rule());
    let parts: Vec<Result<f64>> = nodes
        .par_iter()
        .map(|&(x, t, w)| Ok(w * ev.rho1_with(x, t, cap, z)?))
        .collect();
    sum_results(parts)
}

fn order_mc(ev: &CollisionEvaluator, window: &Window, n: usize) -> Result<OrderValue> {
    if ev.model().kernel.is_zero() {
        return Ok(OrderValue { order: n, value: 0.0, error: 0.0 });
    }
    let integral = window.integral();
    let (value, error) = ev.mc_mean(ev.spec().mc_samples, 0x6d65_6173_0000 + n as u64, |rng| {
        let (x, t) = window.sample(rng);
        Ok(integral * ev.rho_n_sample(n, x, t, rng)?)
    })?;
    Ok(OrderValue { order: n, value, error })
}

/// Lemma-type bound on `M(rho_{>=2})` for a K-probe:
/// `C_K^2 |V| e^{C_K |V| T} / 2 * eps^-3 * C_sv * int t^2 eta^-1 psi_t dt`,
/// times the computed mass of the velocity cap.
pub fn k_tail_bound(model: &ModelConfig, probe: &KProbe, cap_mass: f64) -> f64 {
    let ck = model.kernel.bound();
    let p = ck * SPHERE_AREA * model.horizon;
    let c = ck * ck * SPHERE_AREA * p.exp() / 2.0;
    let t_m = probe.geometry.t_m;
    let moment: f64 = probe
        .bumps
        .psi_t
        .line_rule(16)
        .iter()
        .map(|&(tau, w)| w * (t_m + probe.eta * tau).powi(2))
        .sum();
    c / probe.eps.powi(3) * probe.c_sv * moment * cap_mass
}

/// Bound on the measured tail past depth `n`; infinite when the series
/// admissibility condition fails and no other bound applies.
pub fn tail_bound(n: usize, model: &ModelConfig, probe: &Probe, cap_mass: f64) -> f64 {
    let generic = remainder_bound(n, model)
        .map(|r| r * probe.window().integral() * cap_mass / probe.eps().powi(3))
        .unwrap_or(f64::INFINITY);
    match probe {
        Probe::K(k) if n >= 1 => generic.min(k_tail_bound(model, k, cap_mass)),
        _ => generic,
    }
}

/// Series measurement through order `n`.
///
/// The evaluator must have been built from `probe.initial()`. The
/// deterministic orders report `|fine - coarse|` against a rule of half the
/// order as their error.
pub fn measure(ev: &CollisionEvaluator, probe: &Probe, n: usize) -> Result<MeasurementResult> {
    if *ev.source() != probe.initial()? {
        return Err(Error::Probe("evaluator initial data does not match the probe".into()));
    }
    let window = probe.window();
    check_window(&window, ev.model().horizon)?;
    let coarse = CollisionEvaluator::new(ev.model().clone(), *ev.source(), ev.spec().coarse(), ev.seed())?;

    let m0 = order0(ev, &window)?;
    let m0c = order0(&coarse, &window)?;
    let mut per_order = vec![OrderValue { order: 0, value: m0, error: (m0 - m0c).abs() }];
    if n >= 1 {
        let m1 = order1(ev, &window)?;
        let m1c = order1(&coarse, &window)?;
        per_order.push(OrderValue { order: 1, value: m1, error: (m1 - m1c).abs() });
    }
    for k in 2..=n {
        per_order.push(order_mc(ev, &window, k)?);
    }
    let tail_estimate = if ev.model().kernel.is_zero() {
        Some(OrderValue { order: n + 1, value: 0.0, error: 0.0 })
    } else {
        let (mut v, mut e2) = (0.0, 0.0);
        for k in n + 1..=n + TAIL_EXTRA_ORDERS {
            let o = if k == 1 {
                let m1 = order1(ev, &window)?;
                OrderValue { order: 1, value: m1, error: (m1 - order1(&coarse, &window)?).abs() }
            } else {
                order_mc(ev, &window, k)?
            };
            v += o.value;
            e2 += o.error * o.error;
        }
        Some(OrderValue { order: n + 1, value: v, error: e2.sqrt() })
    };
    let total = per_order.iter().map(|o| o.value).sum();
    let error = per_order.iter().map(|o| o.error * o.error).sum::<f64>().sqrt();
    Ok(MeasurementResult {
        method: Method::Series,
        total,
        error,
        per_order,
        tail_bound: tail_bound(n, ev.model(), probe, ev.cap_mass()),
        tail_estimate,
        cap_mass: ev.cap_mass(),
        window_integral: window.integral(),
        probe: probe.summary(),
    })
}

/// Builds the evaluator for `probe` and measures through order `n`.
pub fn measure_probe(
    model: &ModelConfig,
    probe: &Probe,
    spec: crate::solver::QuadratureSpec,
    seed: u64,
    n: usize,
) -> Result<MeasurementResult> {
    let ev = CollisionEvaluator::new(model.clone(), probe.initial()?, spec, seed)?;
    measure(&ev, probe, n)
}

/// `int_0^T psi(X_t, t) dt` along one trajectory, split by jump count.
fn trajectory_integral(tr: &[crate::particles::Event], horizon: f64, window: &Window, rule: &GaussRule, out: &mut Vec<f64>) {
    out.clear();
    let (tw0, tw1) = window.time_range();
    let outer = window.spatial_radius();
    let plateau = window.scale * window.psi_x.plateau_radius();
    let tp = window.eta * window.psi_t.plateau_radius();
    let mut breaks = Vec::with_capacity(8);
    for (k, e) in tr.iter().enumerate() {
        let t_end = tr.get(k + 1).map_or(horizon, |n| n.t);
        let (a, b) = (e.t.max(tw0), t_end.min(tw1));
        if b <= a {
            continue;
        }
        // x(t) - centre = base + v (t - e.t)
        let base = e.x - window.center;
        let Some((c0, c1)) = chord(base, -e.v, outer) else { continue };
        let (lo, hi) = (a.max(e.t + c0), b.min(e.t + c1));
        if hi <= lo {
            continue;
        }
        breaks.clear();
        breaks.push(lo);
        if let Some((p0, p1)) = chord(base, -e.v, plateau) {
            breaks.extend([e.t + p0, e.t + p1]);
        }
        breaks.extend([window.t_m - tp, window.t_m + tp]);
        breaks.retain(|&s| s >= lo && s <= hi);
        breaks.push(hi);
        breaks.sort_by(f64::total_cmp);
        let mut acc = 0.0;
        for w in breaks.windows(2) {
            if w[1] > w[0] {
                acc += rule.integrate(w[0], w[1], |t| window.eval(e.x + e.v * (t - e.t), t));
            }
        }
        if acc != 0.0 {
            if out.len() <= k {
                out.resize(k + 1, 0.0);
            }
            out[k] += acc;
        }
    }
}

/// Trajectory-average measurement: `mass * mean int psi(X_t, t) dt`, split
/// by jump count. Errors are one standard error.
pub fn measure_particle(ensemble: &ParticleEnsemble, probe: &Probe) -> Result<MeasurementResult> {
    let window = probe.window();
    check_window(&window, ensemble.horizon)?;
    let rule = GaussRule::new(SEGMENT_ORDER);
    let count = ensemble.count;
    const CHUNK: usize = 1024;
    let chunks = count.div_ceil(CHUNK);
    // per chunk: per-order (sum, sum of squares), and totals
    let parts: Vec<(Vec<(f64, f64)>, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut by_order: Vec<(f64, f64)> = Vec::new();
            let (mut s, mut ss) = (0.0, 0.0);
            let mut buf = Vec::new();
            for i in c * CHUNK..((c + 1) * CHUNK).min(count) {
                trajectory_integral(ensemble.trajectory(i), ensemble.horizon, &window, &rule, &mut buf);
                if buf.is_empty() {
                    continue;
                }
                if by_order.len() < buf.len() {
                    by_order.resize(buf.len(), (0.0, 0.0));
                }
                let mut tot = 0.0;
                for (k, &y) in buf.iter().enumerate() {
                    by_order[k].0 += y;
                    by_order[k].1 += y * y;
                    tot += y;
                }
                s += tot;
                ss += tot * tot;
            }
            (by_order, s, ss)
        })
        .collect();
    let mut by_order: Vec<(f64, f64)> = Vec::new();
    let (mut s, mut ss) = (0.0, 0.0);
    for (bo, a, b) in parts {
        if by_order.len() < bo.len() {
            by_order.resize(bo.len(), (0.0, 0.0));
        }
        for (acc, x) in by_order.iter_mut().zip(bo) {
            acc.0 += x.0;
            acc.1 += x.1;
        }
        s += a;
        ss += b;
    }
    let mass = ensemble.mass;
    let stats = |s: f64, ss: f64| -> (f64, f64) {
        let n = count as f64;
        let mean = s / n;
        let var = if count > 1 { ((ss / n - mean * mean) * n / (n - 1.0)).max(0.0) } else { 0.0 };
        (mass * mean, mass * (var / n).sqrt())
    };
    if by_order.is_empty() {
        by_order.push((0.0, 0.0));
    }
    let per_order = by_order
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| {
            let (value, error) = stats(a, b);
            OrderValue { order: k, value, error }
        })
        .collect();
    let (total, error) = stats(s, ss);
    Ok(MeasurementResult {
        method: Method::Particle,
        total,
        error,
        per_order,
        tail_bound: 0.0,
        tail_estimate: None,
        cap_mass: mass,
        window_integral: window.integral(),
        probe: probe.summary(),
    })
}

/// `mass * mean int_0^T psi(X_t, t) dt` for an arbitrary smooth `psi`, each
/// free-flight segment integrated by an `order`-point Gauss rule. Returns
/// the estimate and its standard error.
pub fn trajectory_average(ensemble: &ParticleEnsemble, psi: impl Fn(Vec3, f64) -> f64 + Sync, order: usize) -> (f64, f64) {
    let rule = GaussRule::new(order);
    let vals: Vec<f64> = (0..ensemble.count)
        .into_par_iter()
        .map(|i| {
            let tr = ensemble.trajectory(i);
            let mut acc = 0.0;
            for (k, e) in tr.iter().enumerate() {
                let end = tr.get(k + 1).map_or(ensemble.horizon, |n| n.t);
                acc += rule.integrate(e.t, end, |t| psi(e.x + e.v * (t - e.t), t));
            }
            acc
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (ensemble.mass * mean, ensemble.mass * (var / n).sqrt())
}

/// `rho_n(x, t)` for a single order or the sum through `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderSelector {
    Order(usize),
    Through(usize),
}

/// `rho` at `(x, t)` with its error (nonzero only for sampled orders).
pub fn eval_rho(ev: &CollisionEvaluator, sel: OrderSelector, x: Vec3, t: f64) -> Result<(f64, f64)> {
    match sel {
        OrderSelector::Order(n) => ev.eval_rho(n, x, t),
        OrderSelector::Through(n) => {
            let (mut v, mut e2) = (0.0, 0.0);
            for k in 0..=n {
                let (a, e) = ev.eval_rho(k, x, t)?;
                v += a;
                e2 += e * e;
            }
            Ok((v, e2.sqrt()))
        }
    }
}
