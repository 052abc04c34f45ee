//! Scenario files bundled into the binary.

use crate::config::{ConfigError, Scenario};

const PRESETS: [(&str, &str); 5] = [
    ("fig2", include_str!("../presets/fig2.toml")),
    ("fig3a", include_str!("../presets/fig3a.toml")),
    ("fig3b", include_str!("../presets/fig3b.toml")),
    ("laser-cal", include_str!("../presets/laser-cal.toml")),
    ("tradeoff", include_str!("../presets/tradeoff.toml")),
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// Raw TOML of a preset.
pub fn source(name: &str) -> Result<&'static str, ConfigError> {
    PRESETS
        .iter()
        .find(|p| p.0 == name)
        .map(|p| p.1)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
}

pub fn load(name: &str) -> Result<Scenario, ConfigError> {
    Scenario::from_toml(source(name)?)
}
