//! Shipped experiment configurations.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

const PRESETS: [(&str, &str); 7] = [
    ("treesatai_ts", include_str!("../presets/treesatai_ts.json")),
    ("pastis_hd", include_str!("../presets/pastis_hd.json")),
    ("flair2", include_str!("../presets/flair2.json")),
    ("flair_hub", include_str!("../presets/flair_hub.json")),
    ("synthetic_temporal", include_str!("../presets/synthetic_temporal.json")),
    ("synthetic_spectral", include_str!("../presets/synthetic_spectral.json")),
    ("synthetic_segmentation", include_str!("../presets/synthetic_segmentation.json")),
];

/// The four benchmark presets, in table order.
pub const BENCHMARKS: [&str; 4] = ["treesatai_ts", "pastis_hd", "flair2", "flair_hub"];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.0)
}

pub fn source(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".json").unwrap_or(name);
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = source(name).ok_or_else(|| {
        Error::invalid(format!("unknown preset `{name}` (known: {})", names().collect::<Vec<_>>().join(", ")))
    })?;
    ExperimentConfig::from_json(text)
}
