use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn agile(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agile"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let config = json!({
        "model": {"input_shape": [8, 8, 7], "blocks": 2, "filters": 4},
        "world": {"patch_size": 8, "real_tasks": 1, "meta_samples": 40, "real_samples": 200},
        "meta": {"iterations": 3, "checkpoint_every": 0, "meta_batch": 2,
                 "episode": {"k_max": 2, "query_per_class": 2}},
        "active": {"mc_passes": 3, "candidates": 16},
        "vanilla": {"updates": 3, "minibatch": 8},
        "pretrain": {"updates": 2, "minibatch": 8},
        "runs": 2,
        "curve_steps": 2,
        "calibration": 32
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = agile(&["bench", "--config", "nowhere/cfg.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere/cfg.json"), "{}", stderr(&out));
    assert!(!stderr(&out).contains("panicked"));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(agile(&["bench", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(agile(&["frobnicate"], dir.path()).status.code(), Some(2));

    std::fs::write(dir.path().join("broken.json"), "{\"runs\": ").unwrap();
    let out = agile(&["bench", "--config", "broken.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("broken.json"));

    std::fs::write(dir.path().join("zero.json"), "{\"runs\": 0}").unwrap();
    assert_eq!(agile(&["bench", "--config", "zero.json"], dir.path()).status.code(), Some(2));

    let cfg = tiny_config(dir.path());
    assert_eq!(agile(&["bench", "--config", &cfg, "--methods", "magic"], dir.path()).status.code(), Some(2));
    assert_eq!(agile(&["sweep", "--config", &cfg, "--sizes", "1%,x"], dir.path()).status.code(), Some(2));
    assert_eq!(agile(&["export", "results/none"], dir.path()).status.code(), Some(2));
}

#[test]
fn bench_writes_results_and_export_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = agile(
        &["bench", "--config", &cfg, "--seed", "7", "--run-id", "a", "--methods", "vanilla_limit,maml,agile_phase2"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("results/a");
    for f in ["config.json", "runs.json", "metrics.csv", "curves.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert!(run.join("checkpoints/base-seed7/final").is_dir());
    assert!(run.join("checkpoints/augmented-seed8/final").is_dir());
    let config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 7);
    assert_eq!(config["model"]["filters"], 4);

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("method,size,samples,precision,recall,f1,accuracy,std,ci95_lo,ci95_hi,runs"));

    let out = agile(&["export", "results/a", "--format", "csv"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), metrics);

    let out = agile(&["export", "results/a", "--format", "xml"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    // Same seed, same bytes.
    let out = agile(
        &["bench", "--config", &cfg, "--seed", "7", "--run-id", "b", "--methods", "vanilla_limit,maml,agile_phase2"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let a = std::fs::read(run.join("runs.json")).unwrap();
    let b = std::fs::read(dir.path().join("results/b/runs.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn meta_train_then_adapt_and_active_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = agile(&["meta-train", "--config", &cfg, "--run-id", "mt"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = dir.path().join("results/mt/checkpoints/final");
    assert!(ckpt.join("state.json").is_file());
    assert!(dir.path().join("results/mt/checkpoints/training_log.csv").is_file());
    let ckpt = ckpt.to_string_lossy().into_owned();

    let out = agile(&["adapt", "--config", &cfg, "--theta", &ckpt, "--samples", "4", "--run-id", "ad"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let curves = std::fs::read_to_string(dir.path().join("results/ad/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3);
    assert!(!dir.path().join("results/ad/checkpoints").exists(), "no meta-training when θ is given");

    let out = agile(
        &["active", "--config", &cfg, "--theta", &ckpt, "--budget", "6", "--strategy", "random", "--run-id", "ac"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let log = std::fs::read_to_string(dir.path().join("results/ac/query_log_real0-m5.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);

    let out = agile(&["sweep", "--config", &cfg, "--method", "vanilla_limit", "--sizes", "4,10%", "--run-id", "sw"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let sweep = std::fs::read_to_string(dir.path().join("results/sw/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);

    let out = agile(&["meta-train", "--config", &cfg, "--resume", "results/nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
