//! Executes a validated config and writes the artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use ktlab_core::fields::ModelConfig;
use ktlab_core::measurement::MeasurementResult;
use ktlab_core::particles::simulate_particles;
use ktlab_core::probe::Probe;
use ktlab_core::reconstruction::{ground_truth, lemma_diagnostics, run_ladder, LadderReport, Measurer, SeriesMeasurer};

use crate::config::ExperimentConfig;
use crate::output::{diagnostics_csv, render_summary, rungs_csv, RunMeta};

const CACHE_VERSION: &str = "ktlab-measure-v1";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub use_cache: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    /// Some rungs failed.
    Partial,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: LadderReport,
    pub status: RunStatus,
    /// `Some(pass)` when the config has an `[expect]` section.
    pub expectation: Option<bool>,
    pub out_dir: PathBuf,
    pub summary: String,
}

/// Series measurer with an on-disk cache keyed by the SHA-256 of
/// `(model, probe, quadrature, depth, seed)`.
pub struct CachedMeasurer<'a> {
    inner: SeriesMeasurer<'a>,
    model_key: String,
    dir: Option<PathBuf>,
}

impl<'a> CachedMeasurer<'a> {
    pub fn new(inner: SeriesMeasurer<'a>, model_key: String, dir: Option<PathBuf>) -> Self {
        CachedMeasurer { inner, model_key, dir }
    }

    pub fn key(&self, probe: &Probe, seed: u64) -> String {
        // Debug output of f64 round-trips exactly
        let text = format!(
            "{CACHE_VERSION}|{}|{probe:?}|{:?}|{}|{seed}",
            self.model_key, self.inner.quadrature, self.inner.depth
        );
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }
}

impl Measurer for CachedMeasurer<'_> {
    fn measure(&self, probe: &Probe, seed: u64) -> ktlab_core::Result<MeasurementResult> {
        let path = self.path(&self.key(probe, seed));
        if let Some(p) = &path {
            if let Ok(text) = fs::read_to_string(p) {
                if let Ok(m) = serde_json::from_str::<MeasurementResult>(&text) {
                    return Ok(m);
                }
            }
        }
        let m = self.inner.measure(probe, seed)?;
        if let Some(p) = &path {
            // a failed cache write only costs a recomputation later
            if let Ok(text) = serde_json::to_string(&m) {
                let tmp = p.with_extension("tmp");
                if fs::write(&tmp, text).is_ok() {
                    let _ = fs::rename(&tmp, p);
                }
            }
        }
        Ok(m)
    }
}

fn model_key(config: &ExperimentConfig) -> String {
    let m = &config.model;
    format!("{:?}|{:?}|{:?}|{}", m.sigma_mode, m.kernel, m.sigma, m.horizon)
}

/// Output directory: `--out`, else `KTLAB_OUT`, else `output.dir`.
pub fn resolve_out_dir(config: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os("KTLAB_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(&config.output.dir),
    }
}

/// Runs the ladder of a validated config and writes `rungs.csv`,
/// `diagnostics.csv`, `summary.txt` and, when requested, `trajectories.bin`.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let model: ModelConfig = config.model_config()?;
    let spec = config.ladder_spec()?;
    let truth = ground_truth(&model, &spec).ok();
    fs::create_dir_all(&opts.out_dir).with_context(|| format!("creating {}", opts.out_dir.display()))?;
    let cache_dir = if opts.use_cache {
        let d = opts.out_dir.join("cache");
        fs::create_dir_all(&d)?;
        Some(d)
    } else {
        None
    };
    let measurer = CachedMeasurer::new(
        SeriesMeasurer { model: &model, quadrature: spec.quadrature, depth: spec.depth },
        model_key(config),
        cache_dir,
    );
    let report = run_ladder(&spec, &model, &measurer, truth)?;
    let diag = lemma_diagnostics(&report, spec.alpha);
    let meta = RunMeta {
        name: config.name.clone(),
        depth: spec.depth,
        expect: config.expect.map(|e| (e.value, e.tolerance)),
    };
    let rungs = rungs_csv(&report, &meta)?;
    let diags = diagnostics_csv(&report, &diag)?;
    fs::write(opts.out_dir.join("rungs.csv"), &rungs)?;
    fs::write(opts.out_dir.join("diagnostics.csv"), &diags)?;
    let summary = render_summary(&rungs, &diags)?;
    fs::write(opts.out_dir.join("summary.txt"), &summary)?;

    if config.output.trajectories {
        if let Some(rung) = report.rungs.last() {
            let sm = rung.primary();
            let probe = spec.probe(rung.eps, sm.t_m)?;
            let ens = simulate_particles(&model, &probe.initial()?, spec.particles, sm.seed)?;
            let file = fs::File::create(opts.out_dir.join("trajectories.bin"))?;
            let mut w = std::io::BufWriter::new(file);
            ens.write_events(&mut w)?;
            w.flush()?;
        }
    }

    let expectation = config
        .expect
        .map(|e| report.final_estimate.is_some_and(|v| (v - e.value).abs() <= e.tolerance));
    let status = if report.partial { RunStatus::Partial } else { RunStatus::Complete };
    Ok(RunOutcome { report, status, expectation, out_dir: opts.out_dir.clone(), summary })
}
