use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use swimlane_cli::commands::{CompareReport, MembenchReport};
use swimlane_cli::records::{parse_jsonl, read_jsonl};
use swimlane_cli::{success_rate_curve, Body};
use swimlane_core::env::GroupLayout;
use swimlane_core::policy::Params;
use swimlane_core::rollout::RolloutWorker;
use swimlane_core::{ExperimentConfig, Rng};

fn swimlane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swimlane"))
        .args(args)
        .env("DVLA_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn small() -> Value {
    serde_json::json!({
        "runtime": {"epochs": 6, "costs": {"train_us_per_transition": 3.125}}
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Drops every `ts` field.
fn without_timestamps(text: &str) -> Vec<Value> {
    text.lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("ts");
            v
        })
        .collect()
}

#[test]
fn sync_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small());
    let mut files = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("m{i}.jsonl"));
        let o = swimlane(&[
            "train",
            "--config",
            s(&cfg),
            "--mode",
            "sync",
            "--seed",
            "7",
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push(std::fs::read_to_string(&out).unwrap());
    }
    assert_ne!(files[0], "");
    assert_eq!(without_timestamps(&files[0]), without_timestamps(&files[1]));
    let records = parse_jsonl(&files[0]).unwrap();
    let kinds: Vec<&str> = records
        .iter()
        .map(|r| match r.body {
            Body::Epoch(_) => "epoch",
            Body::Update(_) => "update",
            Body::Pool(_) => "pool",
            Body::RunSummary(_) => "run_summary",
        })
        .collect();
    assert_eq!(kinds.iter().filter(|k| **k == "epoch").count(), 6);
    assert_eq!(kinds.iter().filter(|k| **k == "update").count(), 6);
    assert!(kinds.contains(&"pool"));
    assert_eq!(kinds.last(), Some(&"run_summary"));
    let Body::RunSummary(sum) = &records.last().unwrap().body else {
        unreachable!()
    };
    assert_eq!(sum.mode, "sync");
    assert_eq!(sum.seed, 7);
    let t = &sum.throughput;
    assert_eq!(
        t.transitions_per_sec,
        t.inference_steps_per_sec * t.chunk as f64
    );
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\n  \"runtime\": {\n    \"epochz\": 3\n  }\n}\n").unwrap();
    let o = swimlane(&[
        "train",
        "--config",
        s(&p),
        "--out",
        s(&dir.path().join("m.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("epochz") && err.contains("line 3"), "{err}");
    // bad flags too
    let o = swimlane(&["train", "--mode", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
    let o = swimlane(&["simulate", "--sweep", "envs=5..1:1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn aborted_run_exits_2_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    // the first nonzero Adam step overflows f32
    let cfg = write_config(
        dir.path(),
        "c.json",
        &serde_json::json!({"runtime": {"epochs": 4}, "grpo": {"lr": 1e39}, "env": {"success_radius": 0.6}}),
    );
    let out = dir.path().join("m.jsonl");
    let o = swimlane(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("non-finite update") && err.contains("trainer0"),
        "{err}"
    );
    let diag = std::fs::read_to_string(dir.path().join("m.jsonl.abort.txt")).unwrap();
    assert!(diag.contains("non-finite update") && diag.contains("\"lr\""));
}

#[test]
fn simulate_sweep_writes_csv_and_scaling_plot_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &serde_json::json!({"runtime": {"epochs": 8}}),
    );
    let csv = dir.path().join("curve.csv");
    let o = swimlane(&[
        "simulate",
        "--config",
        s(&cfg),
        "--sweep",
        "envs=64..256:64",
        "--out",
        s(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("64,async,hybrid,1:1,"));
    let mut svgs = Vec::new();
    for i in 0..2 {
        let svg = dir.path().join(format!("s{i}.svg"));
        let o = swimlane(&[
            "plot",
            "--in",
            s(&csv),
            "--out",
            s(&svg),
            "--kind",
            "scaling",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        svgs.push(std::fs::read(&svg).unwrap());
    }
    assert_eq!(svgs[0], svgs[1]);
    assert!(String::from_utf8_lossy(&svgs[0]).contains("<polyline"));
    // a single point prints the full result
    let o = swimlane(&["simulate", "--config", s(&cfg)]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["throughput"].as_f64().unwrap() > 0.0);
}

#[test]
fn compare_on_balanced_costs_reports_the_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &serde_json::json!({"runtime": {"epochs": 12, "costs": {"train_us_per_transition": 3.125}}}),
    );
    let out = dir.path().join("report.json");
    let o = swimlane(&["compare", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: CompareReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(r.speedup >= 1.5, "{}", r.speedup);
    assert!((r.speedup - r.sim_speedup).abs() < 0.02 * r.sim_speedup);
    assert!((0.9..=1.1).contains(&r.stage_balance));
    assert!(!r.quasi_synchronous);
    assert_eq!(r.sync.mode, "sync");
    assert_eq!(r.async_.mode, "async");

    for kind in ["throughput", "breakdown"] {
        let svg = dir.path().join(format!("{kind}.svg"));
        let o = swimlane(&["plot", "--in", s(&out), "--out", s(&svg), "--kind", kind]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(text.contains("async hybrid 1:1") && text.contains("sync hybrid 1:1"));
    }
}

#[test]
fn plots_read_metrics_with_a_truncated_tail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small());
    let out = dir.path().join("m.jsonl");
    for mode in ["sync", "async"] {
        let o = swimlane(&[
            "train",
            "--config",
            s(&cfg),
            "--mode",
            mode,
            "--out",
            s(&out),
        ]);
        assert!(o.status.success());
    }
    // a crash mid-write leaves half a line
    let mut text = std::fs::read_to_string(&out).unwrap();
    let first = text.lines().next().unwrap().to_string();
    text.push_str(&first[..first.len() / 2]);
    std::fs::write(&out, &text).unwrap();
    assert_eq!(
        read_jsonl(&out)
            .unwrap()
            .iter()
            .filter(|r| matches!(r.body, Body::RunSummary(_)))
            .count(),
        2
    );
    let svg = dir.path().join("t.svg");
    let o = swimlane(&[
        "plot",
        "--in",
        s(&out),
        "--out",
        s(&svg),
        "--kind",
        "throughput",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = swimlane(&[
        "plot",
        "--in",
        s(&out),
        "--out",
        s(&svg),
        "--kind",
        "scaling",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = swimlane(&[
        "plot",
        "--in",
        s(&dir.path().join("missing")),
        "--out",
        s(&svg),
        "--kind",
        "throughput",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn membench_separates_the_pools() {
    let o = swimlane(&["membench"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: MembenchReport = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r.unified.model_failures >= 1);
    assert_eq!(r.dual.model_failures, 0);
    assert_eq!(r.dual.env_failures, 0);
    assert_eq!(r.model_failure_delta, r.unified.model_failures as i64);
}

#[test]
fn logging_goes_to_stderr_and_respects_the_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small());
    let out = dir.path().join("m.jsonl");
    let quiet = swimlane(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(quiet.stderr.is_empty());
    let info = Command::new(env!("CARGO_BIN_EXE_swimlane"))
        .args(["train", "--config", s(&cfg), "--out", s(&out)])
        .env("DVLA_LOG", "info")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&info.stderr).contains("run finished"));
    // stdout carries only the JSON summary
    let v: Value = serde_json::from_slice(&info.stdout).unwrap();
    assert_eq!(v["final_version"], 6);
}

/// Mean outcome of untrained-policy episodes, straight from the env.
fn random_policy_success(cfg: &ExperimentConfig, seeds: u64) -> f64 {
    let layout = GroupLayout {
        n_groups: cfg.n_groups(),
        group_size: cfg.grpo.group_size,
    };
    let mut total = 0.0;
    for seed in 0..seeds {
        let params: Params<f32> = Params::init(&cfg.policy, &mut Rng::new(seed)).unwrap();
        let mut w = RolloutWorker::new(
            &cfg.env,
            seed,
            layout,
            0,
            cfg.policy.chunk,
            Default::default(),
        )
        .unwrap();
        let out = w.run_epoch(&params, 0, |_, _, _| {}).unwrap();
        let rewards: Vec<f32> = out
            .groups
            .iter()
            .flat_map(|g| g.trajectories.iter().map(|t| t.reward))
            .collect();
        total += rewards.iter().map(|&r| r as f64).sum::<f64>() / rewards.len() as f64;
    }
    total / seeds as f64
}

#[test]
fn success_curve_starts_at_the_random_policy_baseline() {
    let mut cfg = ExperimentConfig::default();
    cfg.env.success_radius = 0.25;
    cfg.runtime.epochs = 3;
    let baseline = random_policy_success(&cfg, 50);
    assert!(baseline < 0.2, "{baseline}");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.jsonl");
    swimlane_cli::commands::train(&cfg, &out).unwrap();
    let curve = success_rate_curve(&read_jsonl(&out).unwrap(), None);
    assert_eq!(curve.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(curve[0].1 < 0.2, "{curve:?}");
}

#[test]
fn constant_reward_gives_a_flat_curve() {
    let mut cfg = ExperimentConfig::default();
    // every episode ends inside the radius
    cfg.env.success_radius = 100.0;
    cfg.runtime.epochs = 4;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.jsonl");
    swimlane_cli::commands::train(&cfg, &out).unwrap();
    let curve = success_rate_curve(&read_jsonl(&out).unwrap(), None);
    assert_eq!(curve.len(), 4);
    assert!(curve.iter().all(|p| p.1 == 1.0), "{curve:?}");
}
