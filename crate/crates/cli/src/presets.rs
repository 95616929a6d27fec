//! Experiment presets shipped with the tool.

use anyhow::{bail, Result};

use crate::config::ExperimentConfig;

pub const PRESETS: &[(&str, &str)] = &[
    (
        "ablate-dssn-vs-preln",
        include_str!("../presets/ablate-dssn-vs-preln.toml"),
    ),
    (
        "ablate-dssn-vs-preln-deep",
        include_str!("../presets/ablate-dssn-vs-preln-deep.toml"),
    ),
    (
        "tinyinit-vs-baseline",
        include_str!("../presets/tinyinit-vs-baseline.toml"),
    ),
    (
        "niah-retrieval",
        include_str!("../presets/niah-retrieval.toml"),
    ),
    ("toy-phases", include_str!("../presets/toy-phases.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Result<&'static str> {
    match PRESETS.iter().find(|(n, _)| *n == name) {
        Some((_, text)) => Ok(text),
        None => bail!(
            "unknown preset `{name}` (available: {})",
            names().collect::<Vec<_>>().join(", ")
        ),
    }
}

pub fn load(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(source(name)?)
}
