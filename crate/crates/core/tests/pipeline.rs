use std::path::{Path, PathBuf};
use std::sync::Arc;

use emobench_core::dataset::{load_csv, stratified_subsample};
use emobench_core::gateway::mock::MockBehavior;
use emobench_core::gateway::server::{spawn, MockServerState};
use emobench_core::metrics::{Averaging, DeltaKind, ScoringMode};
use emobench_core::report::{compare_runs, metrics_csv, METRICS_HEADER};
use emobench_core::runner::{execute, plan_from_parts, resume, ExecuteOptions, RunConfig, RunRecord};
use serde_json::{json, Value};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn corpus() -> PathBuf {
    root().join("data/sample.csv")
}

fn plan_and_run(dir: &Path, config: Value) -> RunRecord {
    let config: RunConfig = serde_json::from_value(config).unwrap();
    let plan = plan_from_parts(config, dir).unwrap();
    execute(&plan, &ExecuteOptions::default()).unwrap().record
}

/// Serves `behavior` over HTTP from a runtime of its own.
fn serve(behavior: MockBehavior, api_key: Option<&str>) -> (String, tokio::runtime::Runtime) {
    let samples = load_csv(corpus(), Default::default()).unwrap().samples;
    let mut state = MockServerState::new(behavior, &samples).unwrap();
    if let Some(key) = api_key {
        state = state.with_api_key(key);
    }
    let rt = tokio::runtime::Runtime::new().unwrap();
    let (addr, _handle) = rt.block_on(spawn(Arc::new(state))).unwrap();
    (format!("http://{addr}"), rt)
}

fn load_preset(name: &str) -> Value {
    let text = std::fs::read_to_string(root().join("presets").join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn presets_encode_the_published_grids() {
    // a corpus large enough for the 2000 + 16000 split
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("text,label\n");
    for i in 0..18_000 {
        text.push_str(&format!("synthetic sentence {i},{}\n", i % 6));
    }
    std::fs::write(dir.path().join("emotion.csv"), text).unwrap();
    std::env::set_var("OPENAI_API_KEY", "test-key");

    let expect = [
        ("paper-s1.json", 6, 1, vec![6]),
        ("paper-s2.json", 3, 5, vec![6]),
        ("paper-s3.json", 3, 1, vec![6, 3, 2]),
    ];
    for (name, backends, strategies, schemes) in expect {
        let mut preset = load_preset(name);
        preset["dataset"]["path"] = json!(dir.path().join("emotion.csv"));
        let config: RunConfig = serde_json::from_value(preset).unwrap();
        let plan = plan_from_parts(config, &root().join("presets")).unwrap();
        assert_eq!(plan.backends.len(), backends, "{name}");
        assert_eq!(plan.strategies.len(), strategies, "{name}");
        assert_eq!(plan.schemes, schemes, "{name}");
        assert_eq!(plan.cells().len(), backends * strategies * schemes.len(), "{name}");
    }
}

#[test]
fn s2_grid_yields_fifteen_metric_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut preset = load_preset("paper-s2.json");
    // same grid, offline backends
    for (i, b) in preset["backends"].as_array_mut().unwrap().iter_mut().enumerate() {
        let name = b["name"].clone();
        *b =
            json!({"name": name, "protocol": "mock", "mock": {"kind": "malformed", "rate": 0.1 * i as f64, "seed": i}});
    }
    preset["dataset"] = json!({"path": corpus(), "subsample": {"n": 120, "seed": 1}});
    preset["run_dir"] = json!("run");
    let record = plan_and_run(dir.path(), preset);
    let csv = metrics_csv(&record, Averaging::Macro);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 16);
    let order: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap(), f.next().unwrap())
        })
        .collect();
    assert_eq!(order[0], ("basic", "gemma"));
    assert_eq!(order[2], ("basic", "llama-3"));
    assert_eq!(order[3], ("mask", "gemma"));
    assert_eq!(order[14], ("inverse", "llama-3"));
    assert!(dir.path().join("run/report/deltas_prompt-pair.csv").exists());
}

#[test]
fn http_backends_match_the_in_process_mock() {
    let (url, _rt) = serve(MockBehavior::Oracle, Some("sekret"));
    std::env::set_var("EMOBENCH_PIPELINE_KEY", "sekret");
    let dir = tempfile::tempdir().unwrap();
    let record = plan_and_run(
        dir.path(),
        json!({
            "dataset": {"path": corpus(), "subsample": {"n": 90, "seed": 2}},
            "backends": [
                {"name": "chat", "protocol": "chat", "base_url": url, "model": "m", "auth_env": "EMOBENCH_PIPELINE_KEY", "use_tools": true, "dialect": "quoted-input"},
                {"name": "tgi", "protocol": "generate", "base_url": url, "model": "m", "auth_env": "EMOBENCH_PIPELINE_KEY", "dialect": "header-delimited"},
                {"name": "plain", "protocol": "chat", "base_url": url, "model": "m", "auth_env": "EMOBENCH_PIPELINE_KEY"}
            ],
            "strategies": ["basic", "mask", "percent", "numeric", "inverse"],
            "schemes": [6, 2],
            "parallelism": 8,
            "run_dir": "run"
        }),
    );
    assert_eq!(record.cells.len(), 27);
    for cell in &record.cells {
        let m = cell.metrics(Averaging::Macro, ScoringMode::Strict).unwrap();
        assert_eq!(m.accuracy, 1.0, "{} {} k{}", cell.backend, cell.strategy.name(), cell.k);
    }
}

#[test]
fn fine_tuned_model_over_chat_gives_model_family_deltas() {
    // a served classifier answers with a bare label, like the fine-tuning service
    let (url, _rt) = serve(MockBehavior::Fixed { label: "joy".into() }, None);
    let dir = tempfile::tempdir().unwrap();
    let data = json!({"path": corpus(), "subsample": {"n": 60, "seed": 4}});
    let llm = plan_and_run(
        dir.path(),
        json!({"dataset": data, "strategies": ["basic"], "schemes": [6], "run_dir": "llm",
               "backends": [{"name": "gemma", "protocol": "mock", "mock": {"kind": "oracle"}}]}),
    );
    let pre = plan_and_run(
        dir.path(),
        json!({"dataset": data, "strategies": ["basic"], "schemes": [6], "run_dir": "pre",
               "backends": [{"name": "bert", "protocol": "chat", "base_url": url, "model": "bert", "family": "pre"}]}),
    );
    let rows = compare_runs(&llm, &pre, DeltaKind::ModelFamily).unwrap();
    assert_eq!(rows.len(), 1);
    let joy_share = pre.cells[0].matrix.counts()[1][1] as f64 / 60.0;
    assert!((rows[0].delta.accuracy - (1.0 - joy_share)).abs() < 1e-12);
    let back = compare_runs(&pre, &llm, DeltaKind::ModelFamily).unwrap();
    assert_eq!(back[0].delta.accuracy, -rows[0].delta.accuracy);
}

#[test]
fn unreachable_backend_aborts_only_its_cells() {
    let dir = tempfile::tempdir().unwrap();
    let config: RunConfig = serde_json::from_value(json!({
        "dataset": {"path": corpus(), "subsample": {"n": 30, "seed": 0}},
        "backends": [
            {"name": "down", "protocol": "chat", "base_url": "http://127.0.0.1:9", "model": "m", "timeout_secs": 2},
            {"name": "up", "protocol": "mock", "mock": {"kind": "oracle"}}
        ],
        "strategies": ["basic"],
        "schemes": [6, 3],
        "run_dir": "run"
    }))
    .unwrap();
    let plan = plan_from_parts(config, dir.path()).unwrap();
    let record = execute(&plan, &ExecuteOptions::default()).unwrap().record;
    assert_eq!(record.aborted_cells(), 2);
    assert!(record
        .cells
        .iter()
        .filter(|c| c.backend == "up")
        .all(|c| c.metrics(Averaging::Macro, ScoringMode::Strict).is_some()));
}

#[test]
fn resuming_a_complete_run_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let config: RunConfig = serde_json::from_value(json!({
        "dataset": {"path": corpus(), "subsample": {"n": 50, "seed": 8}},
        "backends": [{"name": "m", "protocol": "mock", "mock": {"kind": "malformed", "rate": 0.3, "seed": 2}}],
        "strategies": ["basic", "percent"],
        "schemes": [6],
        "run_dir": "run"
    }))
    .unwrap();
    let plan = plan_from_parts(config, dir.path()).unwrap();
    let first = execute(&plan, &ExecuteOptions::default()).unwrap();
    let again = resume(dir.path().join("run"), &ExecuteOptions::default()).unwrap();
    assert_eq!(first.record, again.record);
    assert!(again.stats.cells.iter().all(|c| c.submitted == 0));
    assert_eq!(again.stats.mock_max_in_flight.get("m").copied().unwrap_or(0), 0);
}

#[test]
fn stratified_subsample_preserves_class_shares() {
    let samples = load_csv(corpus(), Default::default()).unwrap().samples;
    let sub = stratified_subsample(&samples, 600, 3).unwrap();
    assert_eq!(sub.len(), 600);
    let share = |s: &[emobench_core::Sample], label: usize| {
        s.iter().filter(|x| x.gold.id() == label).count() as f64 / s.len() as f64
    };
    for label in 0..6 {
        assert!((share(&sub, label) - share(&samples, label)).abs() < 0.01);
    }
}

#[test]
fn schema_lists_every_config_key() {
    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(root().join("presets/config.schema.json")).unwrap()).unwrap();
    let keys = |v: &Value| -> std::collections::BTreeSet<String> { v.as_object().unwrap().keys().cloned().collect() };

    let full: RunConfig = serde_json::from_value(json!({
        "dataset": {"path": "d.csv", "label_format": "auto", "split": {"finetune_size": 1, "eval_size": 1, "strategy": "head-tail"}, "subsample": {"n": 1}},
        "backends": [{"name": "b", "protocol": "chat", "base_url": "http://x", "auth_env": "K", "rate_limit_rps": 1.0,
                      "mock": {"kind": "oracle"}}],
        "strategies": ["basic"],
        "schemes": [6],
        "run_dir": "r",
        "involution": {"joy": "sadness", "sadness": "joy", "love": "anger", "anger": "love", "fear": "surprise", "surprise": "fear"},
        "synonyms": "s.csv",
        "cleanup_rules": {"plain-instruct": "r.tsv"},
        "templates": {"plain-instruct/basic": "t.txt"}
    }))
    .unwrap();
    let full = serde_json::to_value(&full).unwrap();
    let props = &schema["properties"];
    assert_eq!(keys(&full), keys(props));
    assert_eq!(keys(&full["dataset"]), keys(&props["dataset"]["properties"]));
    assert_eq!(
        keys(&full["backends"][0]),
        keys(&props["backends"]["items"]["properties"])
    );
    assert_eq!(keys(&full["policy"]), keys(&props["policy"]["properties"]));
    assert_eq!(
        keys(&full["dataset"]["split"]),
        keys(&props["dataset"]["properties"]["split"]["properties"])
    );

    for preset in ["paper-s1.json", "paper-s2.json", "paper-s3.json", "mock-demo.json"] {
        let p = load_preset(preset);
        assert!(keys(&p).is_subset(&keys(props)), "{preset}");
        for required in schema["required"].as_array().unwrap() {
            assert!(p.get(required.as_str().unwrap()).is_some(), "{preset} lacks {required}");
        }
    }
}
