//! CSV artifacts and the text summary rendered from them.
//!
//! Both CSVs start with a version line (`# ktlab rungs v1`,
//! `# ktlab diagnostics v1`). `rungs.csv` also carries `# meta key=value`
//! and `# failure ...` comment lines, so [`render_summary`] needs nothing
//! but the two files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};

use ktlab_core::measurement::MeasurementResult;
use ktlab_core::reconstruction::{Diagnostics, LadderReport};

pub const RUNGS_VERSION: &str = "# ktlab rungs v1";
pub const DIAGNOSTICS_VERSION: &str = "# ktlab diagnostics v1";

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn flag(x: Option<bool>) -> String {
    x.map(|b| b.to_string()).unwrap_or_default()
}

/// Metadata written into `rungs.csv`.
#[derive(Debug, Clone, Default)]
pub struct RunMeta {
    pub name: String,
    pub depth: usize,
    pub expect: Option<(f64, f64)>,
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

fn measurement_columns(m: &MeasurementResult, depth: usize) -> Vec<String> {
    let mut cols = vec![m.method.as_str().to_string(), num(m.total), num(m.error)];
    for n in 0..=depth {
        match m.order(n) {
            Some(o) => cols.extend([num(o.value), num(o.error)]),
            None => cols.extend([num(0.0), num(0.0)]),
        }
    }
    let (tail, tail_err) = match m.tail_estimate {
        Some(t) => (Some(t.value), Some(t.error)),
        // particle rows: everything past the series depth
        None if m.per_order.iter().any(|o| o.order > depth) => {
            let (v, e) = m.from_order(depth + 1);
            (Some(v), Some(e))
        }
        None => (None, None),
    };
    cols.extend([opt(tail), opt(tail_err)]);
    cols.push(if m.tail_bound > 0.0 || m.method.as_str() == "series" { num(m.tail_bound) } else { String::new() });
    cols.push(num(m.cap_mass));
    cols
}

pub fn rungs_csv(report: &LadderReport, meta: &RunMeta) -> Result<String> {
    let mut head = String::new();
    writeln!(head, "{RUNGS_VERSION}")?;
    let mut kv: Vec<(&str, String)> = vec![
        ("name", meta.name.clone()),
        ("target", report.target.as_str().to_string()),
        ("depth", meta.depth.to_string()),
        ("truth", opt(report.truth)),
        ("c_phipsi", num(report.c_phipsi)),
        ("final_estimate", opt(report.final_estimate)),
        ("final_richardson", opt(report.final_richardson)),
        ("extrapolated", opt(report.extrapolated)),
        ("monotone", flag(report.monotone)),
        ("partial", report.partial.to_string()),
    ];
    if let Some((v, t)) = meta.expect {
        kv.push(("expect_value", num(v)));
        kv.push(("expect_tolerance", num(t)));
    }
    for (k, v) in kv {
        writeln!(head, "# meta {k}={}", one_line(&v))?;
    }
    for f in &report.failures {
        writeln!(head, "# failure index={} eps={} error={}", f.index, num(f.eps), one_line(&f.error))?;
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["rung", "eps", "inner", "label", "t_m", "seed", "method", "total", "error"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for n in 0..=meta.depth {
        header.push(format!("order{n}"));
        header.push(format!("order{n}_error"));
    }
    header.extend(
        ["tail_estimate", "tail_error", "tail_bound", "mass", "recovered", "recovered_leading", "richardson", "deviation"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in &report.rungs {
        for sm in &r.measurements {
            let results = std::iter::once(&sm.series).chain(sm.particle.as_ref());
            for m in results {
                let mut rec = vec![
                    r.index.to_string(),
                    num(r.eps),
                    num(r.inner),
                    sm.label.clone(),
                    num(sm.t_m),
                    sm.seed.to_string(),
                ];
                rec.extend(measurement_columns(m, meta.depth));
                let series = m.method.as_str() == "series";
                let first = std::ptr::eq(sm, &r.measurements[0]);
                if series && first {
                    rec.extend([num(r.recovered), num(r.recovered_leading), opt(r.richardson), opt(r.deviation)]);
                } else {
                    rec.extend([String::new(), String::new(), String::new(), String::new()]);
                }
                w.write_record(&rec)?;
            }
        }
    }
    let body = String::from_utf8(w.into_inner()?)?;
    Ok(head + &body)
}

pub fn diagnostics_csv(report: &LadderReport, diag: &Diagnostics) -> Result<String> {
    let mut out = format!("{DIAGNOSTICS_VERSION}\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rung",
        "eps",
        "total",
        "order0_share",
        "order1_share",
        "tail_ge2",
        "tail_ge2_error",
        "tail_estimate",
        "tail_error",
        "tail_bound",
        "tail_within_bound",
        "scaling_bound",
        "scaling_ok",
        "fitted_exponent",
        "expected_exponent",
        "particle_total",
        "particle_error",
        "z_score",
        "methods_agree",
    ])?;
    for (row, rung) in diag.rows.iter().zip(&report.rungs) {
        let primary = rung.primary();
        let (pt, pe, z) = match &primary.particle {
            Some(p) => {
                let comb = (p.error.powi(2) + primary.series.error.powi(2)).sqrt();
                let z = if comb > 0.0 { (primary.series.total - p.total) / comb } else { 0.0 };
                (Some(p.total), Some(p.error), Some(z))
            }
            None => (None, None, None),
        };
        w.write_record([
            row.index.to_string(),
            num(row.eps),
            num(row.total),
            num(row.order0_share),
            num(row.order1_share),
            num(row.tail_ge2),
            num(row.tail_ge2_error),
            opt(row.tail_estimate),
            opt(row.tail_error),
            num(row.tail_bound),
            flag(row.tail_within_bound),
            opt(row.scaling_bound),
            flag(row.scaling_ok),
            opt(diag.fitted_exponent),
            opt(diag.expected_exponent),
            opt(pt),
            opt(pe),
            opt(z),
            flag(z.map(|z| z.abs() <= 3.0)),
        ])?;
    }
    out.push_str(&String::from_utf8(w.into_inner()?)?);
    Ok(out)
}

/// Parsed CSV: version line checked, `# meta` pairs, `# failure` lines and
/// records keyed by column name.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    pub meta: BTreeMap<String, String>,
    pub failures: Vec<String>,
    pub rows: Vec<BTreeMap<String, String>>,
}

impl CsvTable {
    pub fn parse(text: &str, version: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.trim() == version => {}
            Some(l) => bail!("expected version line `{version}`, found `{l}`"),
            None => bail!("empty CSV"),
        }
        let mut table = CsvTable::default();
        let mut body = String::new();
        for l in lines {
            if let Some(rest) = l.strip_prefix("# meta ") {
                let (k, v) = rest.split_once('=').context("malformed meta line")?;
                table.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = l.strip_prefix("# failure ") {
                table.failures.push(rest.to_string());
            } else if !l.starts_with('#') {
                body.push_str(l);
                body.push('\n');
            }
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let header = r.headers()?.clone();
        for rec in r.records() {
            let rec = rec?;
            table.rows.push(header.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
        }
        Ok(table)
    }
}

fn field(row: &BTreeMap<String, String>, key: &str) -> Option<f64> {
    row.get(key).and_then(|s| s.parse().ok())
}

fn show(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into())
}

/// Outcome of the `[expect]` check recorded in `rungs.csv`, if any.
pub fn expectation(rungs: &CsvTable) -> Option<(f64, f64, Option<f64>, bool)> {
    let value: f64 = rungs.meta.get("expect_value")?.parse().ok()?;
    let tol: f64 = rungs.meta.get("expect_tolerance")?.parse().ok()?;
    let got: Option<f64> = rungs.meta.get("final_estimate").and_then(|s| s.parse().ok());
    let ok = got.is_some_and(|g| (g - value).abs() <= tol);
    Some((value, tol, got, ok))
}

/// Human-readable report from the contents of `rungs.csv` and `diagnostics.csv`.
pub fn render_summary(rungs_text: &str, diagnostics_text: &str) -> Result<String> {
    let rungs = CsvTable::parse(rungs_text, RUNGS_VERSION).context("rungs.csv")?;
    let diag = CsvTable::parse(diagnostics_text, DIAGNOSTICS_VERSION).context("diagnostics.csv")?;
    let meta = |k: &str| rungs.meta.get(k).cloned().unwrap_or_default();
    let metaf = |k: &str| rungs.meta.get(k).and_then(|s| s.parse::<f64>().ok());
    let mut s = String::new();
    writeln!(s, "ktlab report: {}", meta("name"))?;
    writeln!(s, "target: {}   series depth N = {}", meta("target"), meta("depth"))?;
    writeln!(s, "C_phipsi = {}   truth = {}", show(metaf("c_phipsi")), show(metaf("truth")))?;
    writeln!(s)?;
    writeln!(
        s,
        "{:>4} {:>12} {:>12} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "rung", "eps", "inner", "M (series)", "M error", "recovered", "leading", "deviation"
    )?;
    for row in rungs.rows.iter().filter(|r| r.get("recovered").is_some_and(|v| !v.is_empty())) {
        writeln!(
            s,
            "{:>4} {:>12} {:>12} {:>14} {:>14} {:>14} {:>14} {:>14}",
            row.get("rung").map(String::as_str).unwrap_or("?"),
            show(field(row, "eps")),
            show(field(row, "inner")),
            show(field(row, "total")),
            show(field(row, "error")),
            show(field(row, "recovered")),
            show(field(row, "recovered_leading")),
            show(field(row, "deviation")),
        )?;
    }
    writeln!(s)?;
    writeln!(s, "final estimate (finest rung): {}", show(metaf("final_estimate")))?;
    if metaf("final_richardson").is_some() {
        writeln!(s, "Richardson value (finest rung): {}", show(metaf("final_richardson")))?;
    }
    writeln!(s, "linear extrapolation in eps: {}", show(metaf("extrapolated")))?;
    let mono = match meta("monotone").as_str() {
        "true" => "yes",
        "false" => "no",
        _ => "n/a (fewer than 3 rungs or no reference)",
    };
    writeln!(s, "deviation non-increasing over the last 3 rungs: {mono}")?;
    writeln!(s)?;
    writeln!(s, "diagnostics")?;
    writeln!(
        s,
        "{:>4} {:>10} {:>10} {:>14} {:>14} {:>14} {:>8} {:>10}",
        "rung", "order0 %", "order1 %", "rho>=2", "tail est", "tail bound", "tail ok", "z (part)"
    )?;
    for row in &diag.rows {
        let pct = |k: &str| field(row, k).map(|v| format!("{:.4}", 100.0 * v)).unwrap_or_else(|| "-".into());
        let text = |k: &str| row.get(k).filter(|v| !v.is_empty()).cloned().unwrap_or_else(|| "-".into());
        writeln!(
            s,
            "{:>4} {:>10} {:>10} {:>14} {:>14} {:>14} {:>8} {:>10}",
            text("rung"),
            pct("order0_share"),
            pct("order1_share"),
            show(field(row, "tail_ge2")),
            show(field(row, "tail_estimate")),
            show(field(row, "tail_bound")),
            text("tail_within_bound"),
            field(row, "z_score").map(|z| format!("{z:+.2}")).unwrap_or_else(|| "-".into()),
        )?;
    }
    if let Some(first) = diag.rows.first() {
        if let (Some(f), Some(e)) = (field(first, "fitted_exponent"), field(first, "expected_exponent")) {
            writeln!(s, "rho>=2 scaling exponent: fitted {f:.3}, expected 4 alpha - 3 = {e:.3}")?;
        }
    }
    writeln!(s)?;
    if let Some((value, tol, got, ok)) = expectation(&rungs) {
        writeln!(
            s,
            "expectation: {} within {} of {}: {}",
            show(got),
            show(Some(tol)),
            show(Some(value)),
            if ok { "PASS" } else { "FAIL" }
        )?;
    }
    if rungs.failures.is_empty() {
        writeln!(s, "status: complete")?;
    } else {
        writeln!(s, "status: partial ({} failed rung(s))", rungs.failures.len())?;
        for f in &rungs.failures {
            writeln!(s, "  failed: {f}")?;
        }
    }
    Ok(s)
}
