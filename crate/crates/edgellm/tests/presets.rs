use edgellm::config::{ConfigFile, PRESETS};
use edgellm_core::config::ModelConfig;
use edgellm_core::perf::HwConfig;

#[test]
fn presets_match_builtin_models() {
    for (name, _) in PRESETS {
        let c = ConfigFile::preset(name).unwrap();
        assert_eq!(c.model, ModelConfig::preset(name).unwrap(), "{name}");
        assert_eq!(c.hw, HwConfig::default(), "{name}");
    }
}

#[test]
fn load_by_path_or_name() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../presets/toy.json");
    assert_eq!(ConfigFile::load(path).unwrap(), ConfigFile::load("toy").unwrap());
    assert!(ConfigFile::load("no-such-model").is_err());
    assert!(ConfigFile::load("/no/such/file.json").is_err());
}

#[test]
fn hw_overrides_merge_with_defaults() {
    let mut v: serde_json::Value = serde_json::from_str(PRESETS[2].1).unwrap();
    v["hw"] = serde_json::json!({ "efficiency": 0.5 });
    let c = ConfigFile::parse(&v.to_string()).unwrap();
    assert_eq!(c.hw.efficiency, 0.5);
    assert_eq!(c.hw.hbm_ports, HwConfig::default().hbm_ports);
}

#[test]
fn invalid_models_are_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(PRESETS[2].1).unwrap();
    v["heads"] = serde_json::json!(3);
    assert!(ConfigFile::parse(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(PRESETS[2].1).unwrap();
    v["strategy"] = serde_json::json!("7");
    assert!(ConfigFile::parse(&v.to_string()).is_err());
}
