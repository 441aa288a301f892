//! The example files under `fixtures/` must match the in-code fixtures.
//! Regenerate with `COLA_SIM_BLESS=1 cargo test -p cola-sim-cli --test fixture_files`.

use std::path::{Path, PathBuf};

use cola_sim::config::{RunConfig, TrafficConfig};
use cola_sim::engine::EngineConfig;
use cola_sim::fixtures::{all_mitigations, cruise_scenario, reference_graph, reference_groups};
use cola_sim::pipeline::pipeline_to_json;
use cola_sim::scenario::scenario_to_json;
use cola_sim::scenario::suite::corner_case_suite;
use cola_sim::SimTime;

fn dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn expected() -> Vec<(&'static str, String)> {
    let run = RunConfig {
        scenario: "cruise.scenario.json".into(),
        pipeline: "reference.pipeline.json".into(),
        groups: Some(reference_groups()),
        engine: EngineConfig {
            mitigation: all_mitigations(),
            ..EngineConfig::default()
        },
        traffic: Some(TrafficConfig {
            density: 4.0,
            road: None,
        }),
        seed: Some(7),
        out: None,
        label: "reference".into(),
    };
    vec![
        ("cruise.scenario.json", scenario_to_json(&cruise_scenario(SimTime::from_secs(10)))),
        ("cut_in.scenario.json", scenario_to_json(&corner_case_suite()[8])),
        ("reference.pipeline.json", pipeline_to_json(&reference_graph())),
        ("run.json", serde_json::to_string_pretty(&run).unwrap() + "\n"),
    ]
}

#[test]
fn example_files_are_current() {
    let bless = std::env::var_os("COLA_SIM_BLESS").is_some();
    for (name, text) in expected() {
        let path = dir().join(name);
        if bless {
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let on_disk = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(on_disk, text, "{name} is stale; rerun with COLA_SIM_BLESS=1");
    }
}

#[test]
fn example_config_resolves() {
    let setup = RunConfig::load(dir().join("run.json")).unwrap().resolve().unwrap();
    assert_eq!(setup.seed, Some(7));
    assert_eq!(setup.pipeline.nodes().len(), 6);
}
