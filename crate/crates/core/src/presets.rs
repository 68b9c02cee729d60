//! Named architectures shipped as embedded descriptor documents.

use crate::error::{Error, Result};
use crate::flow::FlowSpec;

const PRESETS: &[(&str, &str)] = &[
    ("baseline", include_str!("../presets/baseline.json")),
    ("absflow-symmetric", include_str!("../presets/absflow-symmetric.json")),
    ("absflow-antisymmetric", include_str!("../presets/absflow-antisymmetric.json")),
    ("augmented", include_str!("../presets/augmented.json")),
    ("sortflow-toy", include_str!("../presets/sortflow-toy.json")),
    ("permuteflow-toy", include_str!("../presets/permuteflow-toy.json")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Raw descriptor text of a preset.
pub fn document(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, d)| *d)
}

pub fn preset(name: &str) -> Result<FlowSpec> {
    let doc = document(name).ok_or_else(|| {
        Error::Descriptor(format!(
            "unknown preset '{name}' (known: {})",
            names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    FlowSpec::from_json(doc)
}
