//! Builtin field catalog and bundled regression configs.

use ktlab_core::fields::{KERNEL_CATALOG, SIGMA_CATALOG};

use crate::config::{parse_config, ConfigError, ExperimentConfig};

pub const FIXTURES: &[(&str, &str)] = &[
    ("sigma-zero", include_str!("../fixtures/sigma-zero.toml")),
    ("sigma-constant", include_str!("../fixtures/sigma-constant.toml")),
    ("sigma-sinusoid", include_str!("../fixtures/sigma-sinusoid.toml")),
    ("k-constant", include_str!("../fixtures/k-constant.toml")),
    ("k-anisotropic", include_str!("../fixtures/k-anisotropic.toml")),
];

pub fn fixture_text(name: &str) -> Option<&'static str> {
    FIXTURES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn fixture(name: &str) -> Option<Result<ExperimentConfig, ConfigError>> {
    fixture_text(name).map(parse_config)
}

/// Catalog listing printed by `ktlab fixtures`.
pub fn list_fixtures() -> String {
    let mut s = String::from("kernel fields:\n");
    for (n, d) in KERNEL_CATALOG {
        s.push_str(&format!("  {n:<14} {d}\n"));
    }
    s.push_str("damping fields (sigma_mode = \"independent\"):\n");
    for (n, d) in SIGMA_CATALOG {
        s.push_str(&format!("  {n:<14} {d}\n"));
    }
    s.push_str("bundled configs:\n");
    for (n, text) in FIXTURES {
        let desc = match parse_config(text) {
            Ok(c) => c.description,
            Err(e) => format!("INVALID: {e}"),
        };
        s.push_str(&format!("  {n:<14} {desc}\n"));
    }
    s
}
