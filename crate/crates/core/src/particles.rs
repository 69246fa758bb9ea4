//! Stochastic velocity-jump particles, used as an independent oracle for
//! the series solver in mass-conserving models.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::ModelConfig;
use crate::geometry::SPHERE_AREA;
use crate::probe::InitialData;
use crate::rng::{derive_seed, stream, uniform_direction};
use crate::vec3::Vec3;

#[inline]
fn sample_exp(rng: &mut impl Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

const PARTICLE_TAG: u64 = 0x7061_7274;

/// State right after an event: the start (`t = 0`) or a velocity jump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub count: usize,
    pub seed: u64,
    pub horizon: f64,
    /// Total mass of the initial data; each particle carries `mass / count`.
    pub mass: f64,
    offsets: Vec<usize>,
    events: Vec<Event>,
}

impl ParticleEnsemble {
    pub fn trajectory(&self, i: usize) -> &[Event] {
        &self.events[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &[Event]> + '_ {
        (0..self.count).map(move |i| self.trajectory(i))
    }

    pub fn jump_counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0] - 1).collect()
    }

    pub fn mean_jumps(&self) -> f64 {
        (self.events.len() - self.count) as f64 / self.count as f64
    }

    /// Position and velocity of particle `i` at time `t`.
    pub fn state_at(&self, i: usize, t: f64) -> (Vec3, Vec3) {
        let tr = self.trajectory(i);
        let k = tr.partition_point(|e| e.t <= t).max(1) - 1;
        let e = tr[k];
        (e.x + e.v * (t - e.t), e.v)
    }

    /// Binary dump, little endian: `b"KTRJ"`, `u32` version 1, `u64` count,
    /// then per particle `u64` id, `u32` jump count, and per jump
    /// `f64` time, `3 x f64` position, `3 x f64` old velocity,
    /// `3 x f64` new velocity. The start state is written as a jump from a
    /// zero old velocity at time 0.
    pub fn write_events(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(b"KTRJ")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.count as u64).to_le_bytes())?;
        for (i, tr) in self.trajectories().enumerate() {
            w.write_all(&(i as u64).to_le_bytes())?;
            w.write_all(&(tr.len() as u32).to_le_bytes())?;
            let mut old = Vec3::ZERO;
            for e in tr {
                w.write_all(&e.t.to_le_bytes())?;
                for c in e.x.0.iter().chain(old.0.iter()).chain(e.v.0.iter()) {
                    w.write_all(&c.to_le_bytes())?;
                }
                old = e.v;
            }
        }
        Ok(())
    }
}

/// Simulates `count` particles drawn from `source` over `[0, T]`.
///
/// Jumps are generated by thinning against the majorant `C_K |V|`: a
/// candidate time is accepted together with a uniformly proposed new
/// velocity `u` with probability `K(x, u, v) / C_K`.
pub fn simulate_particles(model: &ModelConfig, source: &InitialData, count: usize, seed: u64) -> Result<ParticleEnsemble> {
    if !model.is_derived() {
        return Err(Error::config(
            "particle simulation needs sigma derived from the kernel (mass-conserving model)",
        ));
    }
    if count == 0 {
        return Err(Error::config("particle count must be >= 1"));
    }
    let c_k = model.kernel.bound();
    let rate = c_k * SPHERE_AREA;
    let horizon = model.horizon;
    let key = derive_seed(seed, PARTICLE_TAG);
    let kernel = &model.kernel;
    let per: Vec<Result<Vec<Event>>> = (0..count)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            let mut rng = stream(key, i as u64);
            let (x0, v0) = source.sample(&mut rng);
            let mut tr = vec![Event { t: 0.0, x: x0, v: v0 }];
            if rate == 0.0 {
                return Ok(tr);
            }
            let mut cur = tr[0];
            let mut t = 0.0;
            loop {
                t += sample_exp(&mut rng, rate);
                if t >= horizon {
                    break;
                }
                let x = cur.x + cur.v * (t - cur.t);
                let u = uniform_direction(&mut rng);
                let k = kernel.eval(x, u, cur.v);
                if k > c_k * (1.0 + 1e-12) {
                    return Err(Error::Admissibility(format!(
                        "kernel value {k} exceeds C_K = {c_k} at x = {:?}, v = {:?}, v' = {:?}",
                        x.0, u.0, cur.v.0
                    )));
                }
                if rng.gen::<f64>() * c_k < k {
                    cur = Event { t, x, v: u };
                    tr.push(cur);
                }
            }
            Ok(tr)
        })
        .collect();
    let mut offsets = Vec::with_capacity(count + 1);
    let mut events = Vec::with_capacity(count + count / 2);
    offsets.push(0);
    for tr in per {
        events.extend(tr?);
        offsets.push(events.len());
    }
    Ok(ParticleEnsemble {
        count,
        seed,
        horizon,
        mass: source.total_mass()?,
        offsets,
        events,
    })
}
