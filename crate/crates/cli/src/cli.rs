//! Argument parsing and dispatch for the `ktlab` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, ConfigError, ExperimentConfig};
use crate::fixtures::{fixture_text, list_fixtures, FIXTURES};
use crate::output::render_summary;
use crate::run::{resolve_out_dir, run_experiment, RunOptions, RunStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

/// Coefficient recovery experiments for the kinetic chemotaxis equation.
#[derive(Debug, Parser)]
#[command(name = "ktlab", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigSource {
    /// Path to a TOML experiment config.
    #[arg(required_unless_present = "fixture", conflicts_with = "fixture")]
    pub config: Option<PathBuf>,
    /// Use a bundled config instead (see `ktlab fixtures`).
    #[arg(long)]
    pub fixture: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a config without computing anything.
    Validate {
        #[command(flatten)]
        source: ConfigSource,
    },
    /// Run the ladder experiment of a config.
    Run {
        #[command(flatten)]
        source: ConfigSource,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Exit 4 instead of 3 when some rungs fail.
        #[arg(long)]
        partial: bool,
        /// Recompute every measurement.
        #[arg(long)]
        no_cache: bool,
        /// Output directory (overrides KTLAB_OUT and output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List builtin fields and bundled configs.
    Fixtures {
        /// Print the TOML of one bundled config.
        #[arg(long)]
        show: Option<String>,
    },
    /// Regenerate the summary from the CSVs in an output directory.
    Report {
        dir: PathBuf,
    },
}

fn load(source: &ConfigSource) -> Result<ExperimentConfig, (i32, String)> {
    let text = match (&source.config, &source.fixture) {
        (_, Some(name)) => fixture_text(name).map(str::to_string).ok_or_else(|| {
            let names: Vec<&str> = FIXTURES.iter().map(|f| f.0).collect();
            (EXIT_CONFIG, format!("unknown fixture `{name}` (available: {})", names.join(", ")))
        })?,
        (Some(path), None) => fs::read_to_string(path)
            .map_err(|e| (EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))?,
        (None, None) => return Err((EXIT_CONFIG, "no config given".into())),
    };
    parse_config(&text).map_err(|e| (EXIT_CONFIG, config_message(&e)))
}

fn config_message(e: &ConfigError) -> String {
    format!("config error: {e}")
}

fn report(dir: &Path) -> Result<String, (i32, String)> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).map_err(|e| (EXIT_RUNTIME, format!("cannot read {}: {e}", dir.join(name).display())))
    };
    let rungs = read("rungs.csv")?;
    let diags = read("diagnostics.csv")?;
    render_summary(&rungs, &diags).map_err(|e| (EXIT_RUNTIME, format!("{e:#}")))
}

fn dispatch(cli: Cli) -> Result<i32, (i32, String)> {
    match cli.command {
        Command::Validate { source } => {
            let c = load(&source)?;
            println!("{}: ok ({} rung(s), target {})", c.name, c.experiment.eps.len(), c.experiment.target.as_str());
            Ok(EXIT_OK)
        }
        Command::Fixtures { show } => {
            match show {
                Some(name) => print!("{}", fixture_text(&name).ok_or((EXIT_CONFIG, format!("unknown fixture `{name}`")))?),
                None => print!("{}", list_fixtures()),
            }
            Ok(EXIT_OK)
        }
        Command::Report { dir } => {
            print!("{}", report(&dir)?);
            Ok(EXIT_OK)
        }
        Command::Run { source, threads, partial, no_cache, out } => {
            let config = load(&source)?;
            let opts = RunOptions { out_dir: resolve_out_dir(&config, out.as_deref()), use_cache: !no_cache };
            let work = || run_experiment(&config, &opts);
            let outcome = match threads {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| (EXIT_RUNTIME, e.to_string()))?
                    .install(work),
                None => work(),
            }
            .map_err(|e| (EXIT_RUNTIME, format!("run failed: {e:#}")))?;
            print!("{}", outcome.summary);
            println!("artifacts written to {}", outcome.out_dir.display());
            if outcome.expectation == Some(false) {
                return Err((EXIT_RUNTIME, "regression check failed: final estimate outside the [expect] tolerance".into()));
            }
            match (outcome.status, partial) {
                (RunStatus::Complete, _) => Ok(EXIT_OK),
                (RunStatus::Partial, true) => Ok(EXIT_PARTIAL),
                (RunStatus::Partial, false) => {
                    let errs: Vec<String> = outcome.report.failures.iter().map(|f| format!("rung {} (eps = {}): {}", f.index, f.eps, f.error)).collect();
                    Err((EXIT_RUNTIME, format!("rung failure(s) (rerun with --partial to accept):\n  {}", errs.join("\n  "))))
                }
            }
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}
