use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn nats(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nats")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 16×16 images, a handful of samples and one or two epochs per phase.
fn tiny_config(space: Value) -> Value {
    json!({
        "backbone": "mini-resnet",
        "search_space": space,
        "search": { "total_epochs": 3, "batch_size": 8 },
        "synth": {
            "image_size": 16, "scale_preset": "small",
            "train_size": 24, "val_weight_size": 16, "val_alpha_size": 16
        },
        "pretrain": { "epochs": 1, "batch_size": 8, "lr_per_image": 0.001 },
        "retrain": { "epochs": 2, "batch_size": 8, "milestones": [1] },
        "seed": 7
    })
}

fn setting_b() -> Value {
    json!({ "setting": "B", "grouping_mode": "fixed_group_count", "grouping_value": 4 })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn search(dir: &Path, cfg: &Value, out: &str) -> (Output, PathBuf) {
    let c = write_config(dir, cfg);
    let run = dir.join(out);
    let o = nats(&["search", "-c", c.to_str().unwrap(), "-o", run.to_str().unwrap()]);
    (o, run)
}

#[test]
fn degenerate_space_yields_identity_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let space = json!({
        "setting": "custom", "grouping_mode": "fixed_group_count", "grouping_value": 4,
        "stages": { "3": [[1, 1]], "4": [[1, 1]], "5": [[1, 1]] }
    });
    let (o, run) = search(tmp.path(), &tiny_config(space), "run");
    assert!(o.status.success(), "{}", stderr(&o));
    let plan: Value = serde_json::from_str(&fs::read_to_string(run.join("plan.json")).unwrap()).unwrap();
    let layers = plan["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 6);
    for l in layers {
        assert_eq!(l["entries"].as_array().unwrap().len(), 1);
        assert_eq!(l["entries"][0]["dilation"], json!([1, 1]));
    }
    for f in ["resolved_config.json", "alpha_history.jsonl", "metrics.csv", "baseline/manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
}

#[test]
fn missing_config_is_a_validation_error() {
    let o = nats(&["search", "-c", "/nonexistent/config.json", "-o", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config.json"), "{}", stderr(&o));
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(setting_b());
    cfg["search_space"]["grouping_value"] = json!(3);
    let (o, _) = search(tmp.path(), &cfg, "run");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("search_space"), "{}", stderr(&o));

    let mut cfg = tiny_config(setting_b());
    cfg["search"]["alpha_freeze_epochs"] = json!(3);
    let (o, _) = search(tmp.path(), &cfg, "run2");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("search.alpha_freeze_epochs"), "{}", stderr(&o));
}

#[test]
fn pipeline_is_reproducible_and_preserves_costs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(setting_b());
    let (a, run_a) = search(tmp.path(), &cfg, "a");
    assert!(a.status.success(), "{}", stderr(&a));
    let (b, run_b) = search(tmp.path(), &cfg, "b");
    assert!(b.status.success(), "{}", stderr(&b));
    for f in ["plan.json", "alpha_history.jsonl", "metrics.csv"] {
        assert_eq!(fs::read(run_a.join(f)).unwrap(), fs::read(run_b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(run_a.join("alpha_history.jsonl")).unwrap().lines().count(), 3);

    // re-decoding the last epoch reproduces the plan
    let dec = nats(&["decode", "-r", run_a.to_str().unwrap(), "--epoch", "2"]);
    assert!(dec.status.success(), "{}", stderr(&dec));
    assert_eq!(
        fs::read(run_a.join("plan_epoch2.json")).unwrap(),
        fs::read(run_a.join("plan.json")).unwrap()
    );
    let early = nats(&["decode", "-r", run_a.to_str().unwrap(), "--epoch", "0"]);
    assert!(early.status.success());
    let missing = nats(&["decode", "-r", run_a.to_str().unwrap(), "--epoch", "9"]);
    assert_eq!(missing.status.code(), Some(1));

    let rt = nats(&["retrain", "-r", run_a.to_str().unwrap()]);
    assert!(rt.status.success(), "{}", stderr(&rt));
    assert!(stdout(&rt).contains("parity"), "{}", stdout(&rt));
    assert!(run_a.join("retrained/manifest.json").exists());

    let erf = nats(&["erf", "-r", run_a.to_str().unwrap(), "--mass", "0.9"]);
    assert!(erf.status.success(), "{}", stderr(&erf));
    let csv = fs::read_to_string(run_a.join("erf/erf.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(run_a.join("erf/baseline.png").exists() && run_a.join("erf/transformed.png").exists());
}

#[test]
fn identity_plan_retrains_like_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, run) = search(tmp.path(), &tiny_config(setting_b()), "run");
    assert!(o.status.success(), "{}", stderr(&o));
    let mut plan: Value = serde_json::from_str(&fs::read_to_string(run.join("plan.json")).unwrap()).unwrap();
    for l in plan["layers"].as_array_mut().unwrap() {
        let c: u64 = l["entries"].as_array().unwrap().iter().map(|e| e["channels"].as_u64().unwrap()).sum();
        l["entries"] = json!([{ "dilation": [1, 1], "channels": c }]);
        l["permutation"] = json!((0..c).collect::<Vec<_>>());
    }
    let ident = run.join("identity_plan.json");
    fs::write(&ident, serde_json::to_string(&plan).unwrap()).unwrap();
    let rt = nats(&["retrain", "-r", run.to_str().unwrap(), "--baseline", "--plan", ident.to_str().unwrap()]);
    assert!(rt.status.success(), "{}", stderr(&rt));
    assert_eq!(
        fs::read(run.join("retrain_metrics.csv")).unwrap(),
        fs::read(run.join("baseline_retrain_metrics.csv")).unwrap()
    );
}

#[test]
fn corrupted_plan_is_rejected_with_field_name() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, run) = search(tmp.path(), &tiny_config(setting_b()), "run");
    assert!(o.status.success(), "{}", stderr(&o));
    let mut plan: Value = serde_json::from_str(&fs::read_to_string(run.join("plan.json")).unwrap()).unwrap();
    plan["layers"][0]["permutation"][0] = plan["layers"][0]["permutation"][1].clone();
    fs::write(run.join("plan.json"), serde_json::to_string(&plan).unwrap()).unwrap();
    let rt = nats(&["retrain", "-r", run.to_str().unwrap()]);
    assert_eq!(rt.status.code(), Some(1));
    assert!(stderr(&rt).contains("layers.3.0.permutation"), "{}", stderr(&rt));
}

#[test]
fn resume_reuses_state_and_refuses_other_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(setting_b());
    let (o, run) = search(tmp.path(), &cfg, "run");
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = fs::read(run.join("plan.json")).unwrap();
    fs::remove_file(run.join("plan.json")).unwrap();
    let c = write_config(tmp.path(), &cfg);
    let o = nats(&["search", "-c", c.to_str().unwrap(), "-o", run.to_str().unwrap(), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("reusing pretrained baseline"), "{}", stderr(&o));
    assert_eq!(fs::read(run.join("plan.json")).unwrap(), plan);

    let mut other = cfg.clone();
    other["search"]["total_epochs"] = json!(4);
    let c = write_config(tmp.path(), &other);
    let o = nats(&["search", "-c", c.to_str().unwrap(), "-o", run.to_str().unwrap(), "--resume"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn erf_on_missing_run_fails() {
    let o = nats(&["erf", "-r", "/nonexistent/run"]);
    assert_ne!(o.status.code(), Some(0));
    let o = nats(&["erf", "-r", "/nonexistent/run", "--mass", "1.5"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn verify_reports_and_detects_faults() {
    let o = nats(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 8);

    let o = nats(&["verify", "--json"]);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], json!(true));

    let o = nats(&["verify", "--inject-fault", "skip-permutation"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL oracle_equivalence"), "{}", stdout(&o));
}
