//! The shipped preset files load, validate and simulate.

use std::path::PathBuf;

use stratum_core::serving::usage::load_usage;
use stratum_core::serving::{run_serving, NoTrace, Policy, SimOptions};
use stratum_core::{load_config, SimError};

fn preset_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

const SCENARIOS: [&str; 6] = [
    "stratum-s.json",
    "stratum-l.json",
    "stratum-xl.json",
    "mixtral-stratum-l.json",
    "olmoe-stratum-s.json",
    "llama4-stratum-xl.json",
];

#[test]
fn every_preset_file_loads() {
    for name in SCENARIOS {
        let sc =
            load_config(&preset_dir().join(name), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(sc.system.total_capacity_bytes() > 0, "{name}");
    }
    let l = load_config(&preset_dir().join("mixtral-stratum-l.json"), &[]).unwrap();
    assert_eq!(l.system.num_chips, 6);
    assert_eq!(l.model.expert_bytes(), 352_321_536);
    assert_eq!(l.workload.usage.target_hot_hit, 0.485);
}

#[test]
fn every_scenario_simulates_at_small_scale() {
    let shrink: Vec<String> = [
        "workload.input_len=16",
        "workload.output_len=4",
        "workload.duration_s=0.5",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for name in SCENARIOS {
        let sc = load_config(&preset_dir().join(name), &shrink).unwrap();
        let r = run_serving(&sc, &SimOptions::new(Policy::Tiering), &mut NoTrace)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(r.completed, r.requests, "{name}");
    }
}

#[test]
fn overrides_are_validated() {
    let path = preset_dir().join("stratum-l.json");
    let err = load_config(&path, &["workload.max_batch=0".to_string()]).unwrap_err();
    assert!(err.is_validation(), "{err}");
    let err = load_config(&path, &["system.bogus=1".to_string()]).unwrap_err();
    assert!(matches!(err, SimError::Parse(_)), "{err}");
    assert!(matches!(
        load_config(&preset_dir().join("missing.json"), &[]),
        Err(SimError::Io(_))
    ));
}

#[test]
fn usage_table_file() {
    let dir = std::env::temp_dir().join(format!("stratum-usage-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("usage.json");
    let layer = |hot: usize| {
        let mut p = vec![0.05; 8];
        p[hot] = 0.35;
        p[hot + 1] = 0.35;
        p
    };
    let body = serde_json::json!({
        "topics": {
            "a": [layer(0), layer(2)],
            "b": [layer(4), layer(6)],
        }
    });
    std::fs::write(&path, body.to_string()).unwrap();
    let sc = load_config(
        &preset_dir().join("stratum-l.json"),
        &[
            "model.num_layers=2".to_string(),
            "workload.topics=[\"a\",\"b\"]".to_string(),
            "workload.input_len=16".to_string(),
            "workload.output_len=4".to_string(),
            "workload.arrival_rate=20".to_string(),
            "workload.duration_s=0.5".to_string(),
            format!("workload.usage.file={}", path.display()),
        ],
    )
    .unwrap();
    let table = load_usage(&path, &sc.model, &sc.workload.topics).unwrap();
    assert_eq!(table.hot[0], vec![vec![0, 1], vec![2, 3]]);
    assert_eq!(table.hot[1], vec![vec![4, 5], vec![6, 7]]);
    let r = run_serving(&sc, &SimOptions::new(Policy::Tiering), &mut NoTrace).unwrap();
    assert!(r.requests > 0);

    let bad = dir.join("bad.json");
    std::fs::write(
        &bad,
        r#"{"topics": {"a": [[0.5, 0.6, 0, 0, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0, 0, 0]], "b": []}}"#,
    )
    .unwrap();
    assert!(load_usage(&bad, &sc.model, &sc.workload.topics).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
