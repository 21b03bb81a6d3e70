//! The bundled model files under `specs/` must parse, build and yield data.

use admp_core::modelspec::ModelSpec;
use admp_core::Rng;
use rand::SeedableRng;

fn specs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

#[test]
fn bundled_specs_parse_build_and_sample() {
    let dir = specs_dir();
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("model") {
            continue;
        }
        seen += 1;
        let text = std::fs::read_to_string(&path).unwrap();
        let spec = ModelSpec::parse(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        // Canonical text round-trips.
        let canon = spec.to_text();
        assert_eq!(ModelSpec::parse(&canon).unwrap(), spec, "{}", path.display());
        let mut rng = Rng::seed_from_u64(0);
        let built = spec.build(None, &mut rng).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(built.graph.num_vars() >= 2);
        let data = spec.dataset().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!data.is_empty());
    }
    assert_eq!(seen, 5, "expected the five bundled model files");
}
