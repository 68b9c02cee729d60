use std::path::PathBuf;

use serde_json::json;
use survae::docs::{catalog, registry};
use survae::layers::{build_layer, LayerSpec};
use survae::{Noise, Orientation};

fn catalog_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/catalog.md")
}

/// Set `SURVAE_BLESS=1` to rewrite the checked-in catalog.
#[test]
fn checked_in_catalog_is_current() {
    let path = catalog_path();
    let fresh = catalog();
    if std::env::var_os("SURVAE_BLESS").is_some() {
        std::fs::write(&path, &fresh).unwrap();
    }
    let on_disk = std::fs::read_to_string(&path).expect("docs/catalog.md exists");
    assert!(on_disk == fresh, "docs/catalog.md is stale; run `survae catalog > docs/catalog.md`");
}

fn generative_max() -> LayerSpec {
    serde_json::from_value(json!({"kind": "max", "orientation": "generative", "k": 2})).unwrap()
}

#[test]
fn every_buildable_layer_has_an_entry() {
    let specs = json!([
        {"kind": "affine_coupling", "hidden": [4]},
        {"kind": "actnorm"},
        {"kind": "elementwise", "map": {"type": "logit"}},
        {"kind": "permutation", "perm": [1, 0, 3, 2]},
        {"kind": "abs", "orientation": "inference"},
        {"kind": "abs", "orientation": "generative"},
        {"kind": "max", "orientation": "inference"},
        {"kind": "max", "orientation": "generative", "k": 2},
        {"kind": "sort", "orientation": "inference"},
        {"kind": "sort", "orientation": "generative"},
        {"kind": "slice", "orientation": "inference", "aux": 1, "aux_model": {"family": "standard_normal"}},
        {"kind": "slice", "orientation": "generative", "aux": 1, "aux_model": {"family": "standard_normal"}},
        {"kind": "rounding", "orientation": "inference"},
        {"kind": "rounding", "orientation": "generative"},
        {"kind": "relu", "orientation": "inference"},
        {"kind": "relu", "orientation": "generative"},
        {"kind": "stochastic_permutation"},
        {"kind": "vae", "latent": 2},
        {"kind": "ppca", "latent": 2}
    ]);
    let entries: Vec<_> = registry().into_iter().flatten().collect();
    for spec in specs.as_array().unwrap() {
        let spec: LayerSpec = serde_json::from_value(spec.clone()).unwrap();
        // generative max consumes a single data feature
        let dim = if spec == generative_max() { 1 } else { 4 };
        let layer = build_layer(&spec, 0, dim, &mut Noise::from_seed(0)).unwrap();
        let orientation = match layer.orientation() {
            Orientation::Bijective => "bijective",
            Orientation::InferenceSurjective => "inference",
            Orientation::GenerativeSurjective => "generative",
            Orientation::Stochastic => "stochastic",
        };
        assert!(
            entries.iter().any(|e| e.kind == layer.kind() && e.orientation == orientation),
            "no catalog entry for {} ({orientation})",
            layer.kind()
        );
    }
    assert!(entries.len() >= 14);
}
