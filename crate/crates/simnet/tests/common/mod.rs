#![allow(dead_code)]

use std::path::PathBuf;

use pogo_simnet::ScenarioConfig;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load(name: &str, overrides: &[&str]) -> ScenarioConfig {
    let sets: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ScenarioConfig::load(&scenario_dir().join(format!("{name}.toml")), &sets).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Every bundled scenario, by file stem, sorted.
pub fn bundled() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(scenario_dir())
        .expect("scenario directory")
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "toml").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    names.sort();
    names
}
