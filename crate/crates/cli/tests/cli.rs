use std::fs;
use std::path::Path;

use ktlab_cli::cli::{run_cli, EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, EXIT_RUNTIME};
use ktlab_cli::config::{parse_config, to_toml, ConfigError};
use ktlab_cli::fixtures::{fixture, list_fixtures, FIXTURES};
use ktlab_cli::output::render_summary;
use ktlab_cli::run::{run_experiment, RunOptions};

const MINIMAL: &str = r#"
name = "minimal"

[model]
horizon = 1.0
kernel = { name = "constant", value = 0.01 }

[experiment]
target = "sigma-line"
eps = [0.2, 0.1]
"#;

fn with(extra_model: &str, extra_experiment: &str) -> String {
    format!(
        "name = \"t\"\n[model]\nhorizon = 1.0\n{extra_model}\n[experiment]\n{extra_experiment}\n"
    )
}

fn run_in(dir: &Path, text: &str, threads: usize, cache: bool) -> (String, String) {
    let config = parse_config(text).unwrap();
    let opts = RunOptions { out_dir: dir.to_path_buf(), use_cache: cache };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| run_experiment(&config, &opts)).unwrap();
    (
        fs::read_to_string(dir.join("rungs.csv")).unwrap(),
        fs::read_to_string(dir.join("diagnostics.csv")).unwrap(),
    )
}

#[test]
fn minimal_config_fills_defaults_and_round_trips() {
    let c = parse_config(MINIMAL).unwrap();
    assert_eq!(c.experiment.depth, 3);
    assert_eq!(c.experiment.alpha, 0.9);
    assert_eq!(c.experiment.v_i, [1.0, 0.0, 0.0]);
    let again = parse_config(&to_toml(&c)).unwrap();
    assert_eq!(c, again);
}

#[test]
fn alpha_outside_range_names_the_key() {
    let text = with("kernel = { name = \"constant\", value = 0.01 }", "target = \"k-point\"\neps = [1e-4]\nalpha = 0.7");
    let e = parse_config(&text).unwrap_err();
    let v = e.violations();
    assert!(v.iter().any(|v| v.path == "experiment.alpha" && v.message.contains("(3/4, 1)")), "{e}");
}

#[test]
fn inadmissible_kernel_experiment_quotes_the_product() {
    let text = with("kernel = { name = \"constant\", value = 0.1 }", "target = \"k-point\"\neps = [1e-4]");
    let e = parse_config(&text).unwrap_err().to_string();
    assert!(e.contains("1.257"), "{e}");
}

#[test]
fn every_violation_is_reported() {
    let text = with(
        "kernel = { name = \"anisotropic\", value = 0.01, beta = 2.0 }\nsigma = { name = \"zero\" }",
        "target = \"sigma-point\"\neps = [0.1, 0.2]\ndepth = 0\nmc_samples = 10\nunknown_key = 1",
    );
    // unknown keys are reported before anything else
    let e = parse_config(&text).unwrap_err();
    assert_eq!(e.violations().len(), 1);
    assert_eq!(e.violations()[0].path, "experiment.unknown_key");

    let text = text.replace("unknown_key = 1", "");
    let e = parse_config(&text).unwrap_err();
    let paths: Vec<&str> = e.violations().iter().map(|v| v.path.as_str()).collect();
    for want in ["model.kernel.beta", "model.sigma", "experiment.eps", "experiment.depth", "experiment.mc_samples"] {
        assert!(paths.contains(&want), "missing {want} in {paths:?}");
    }
}

#[test]
fn syntax_errors_carry_line_and_column() {
    let e = parse_config("name = \"x\"\n[model\nhorizon = 1\n").unwrap_err();
    match e {
        ConfigError::Syntax { line, column, .. } => assert_eq!((line, column), (2, 7)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_field_name_is_rejected() {
    let text = with("kernel = { name = \"gaussian\", value = 0.01 }", "target = \"sigma-line\"\neps = [0.1]");
    let e = parse_config(&text).unwrap_err().to_string();
    assert!(e.contains("gaussian") && e.contains("constant"), "{e}");
}

#[test]
fn bundled_configs_parse_and_are_listed() {
    let listing = list_fixtures();
    for name in ["constant", "zero", "smooth-space", "anisotropic"] {
        assert!(listing.contains(name), "{listing}");
    }
    for (name, _) in FIXTURES {
        let c = fixture(name).unwrap().unwrap();
        assert_eq!(&c.name, name);
        assert!(listing.contains(name));
    }
}

#[test]
fn zero_coefficients_recover_zero_and_match_the_frozen_value() {
    let dir = tempfile::tempdir().unwrap();
    let text = ktlab_cli::fixtures::fixture_text("sigma-zero").unwrap();
    let config = parse_config(text).unwrap();
    let out = run_experiment(&config, &RunOptions { out_dir: dir.path().to_path_buf(), use_cache: false }).unwrap();
    assert_eq!(out.expectation, Some(true));
    let r = out.report.final_estimate.unwrap();
    assert!(r.abs() < 0.01);
    assert!(out.summary.contains("status: complete"));
}

#[test]
fn reruns_are_identical_across_threads_and_cache() {
    let text = with(
        "kernel = { name = \"constant\", value = 0.02 }",
        "target = \"sigma-line\"\neps = [0.2, 0.1]\ndepth = 2\nrefine = -1\nmc_samples = 256\nparticles = 2000",
    );
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_in(a.path(), &text, 1, true);
    let cached = run_in(a.path(), &text, 1, true);
    let threaded = run_in(b.path(), &text, 4, false);
    assert_eq!(first, cached);
    assert_eq!(first, threaded);
    assert!(fs::read_dir(a.path().join("cache")).unwrap().count() >= 2);
    assert!(!b.path().join("cache").exists());
}

#[test]
fn report_regenerates_the_summary_from_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (rungs, diags) = run_in(dir.path(), MINIMAL, 1, false);
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert_eq!(render_summary(&rungs, &diags).unwrap(), summary);
    assert!(rungs.starts_with("# ktlab rungs v1\n"));
    assert!(diags.starts_with("# ktlab diagnostics v1\n"));
    let code = run_cli(["ktlab", "report", dir.path().to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\n[model]\nhorizon = -1\nkernel = { name = \"zero\" }\n[experiment]\ntarget = \"sigma-line\"\neps = [0.1]\n").unwrap();
    assert_eq!(run_cli(["ktlab", "validate", bad.to_str().unwrap()]), EXIT_CONFIG);
    assert_eq!(run_cli(["ktlab", "run", bad.to_str().unwrap()]), EXIT_CONFIG);
    assert_eq!(run_cli(["ktlab", "validate", "--fixture", "sigma-constant"]), EXIT_OK);
    assert_eq!(run_cli(["ktlab", "validate", "--fixture", "nope"]), EXIT_CONFIG);
    assert_eq!(run_cli(["ktlab", "report", dir.path().join("missing").to_str().unwrap()]), EXIT_RUNTIME);
    assert_eq!(run_cli(["ktlab", "fixtures"]), EXIT_OK);
    assert_eq!(run_cli(["ktlab", "frobnicate"]), EXIT_CONFIG);

    let out = dir.path().join("out");
    let code = run_cli(["ktlab", "run", "--fixture", "sigma-zero", "--out", out.to_str().unwrap(), "--no-cache"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.join("summary.txt").exists());
    assert!(!out.join("cache").exists());

    // a frozen value the run cannot meet fails the regression check
    let text = ktlab_cli::fixtures::fixture_text("sigma-zero").unwrap().replace("0.0023558241109078917", "0.5");
    let cfg = dir.path().join("wrong.toml");
    fs::write(&cfg, text).unwrap();
    let code = run_cli(["ktlab", "run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_RUNTIME);
    assert_ne!(EXIT_PARTIAL, EXIT_RUNTIME);
}

#[test]
fn trajectories_are_dumped_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}\n[output]\ntrajectories = true\n",
        with(
            "kernel = { name = \"constant\", value = 0.02 }",
            "target = \"sigma-line\"\neps = [0.2]\ndepth = 1\nrefine = -1\nparticles = 500",
        )
    );
    run_in(dir.path(), &text, 1, false);
    let bytes = fs::read(dir.path().join("trajectories.bin")).unwrap();
    assert_eq!(&bytes[..4], b"KTRJ");
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 500);
}

#[test]
fn out_flag_wins_over_config() {
    let c = parse_config(MINIMAL).unwrap();
    let p = ktlab_cli::run::resolve_out_dir(&c, Some(Path::new("/x/flag")));
    assert_eq!(p, Path::new("/x/flag"));
}
