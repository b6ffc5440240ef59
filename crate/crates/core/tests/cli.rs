use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use volfit::harness::ExperimentConfig;
use volfit::market::{MarketConfig, Shape};
use volfit::rewards::RewardKind;
use volfit::Algorithm;

fn volfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volfit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn phase(cmd: &str, config: &Path, out: &Path) -> Output {
    volfit(&[
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ])
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::new(
        Algorithm::Ddpg,
        MarketConfig::static_market(Shape::Skew),
        RewardKind::Mse,
        1500,
    );
    cfg.seeds = vec![0, 1, 2, 3];
    cfg.eval_every = 20;
    cfg.validation_agents = 3;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn full_pipeline_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("run");

    for cmd in ["gen-market", "bench", "train"] {
        let o = phase(cmd, &config, &out);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let validate = phase("validate", &config, &out);
    assert!(validate.status.success());
    let stdout = String::from_utf8_lossy(&validate.stdout);
    assert!(stdout.contains("result=selected"), "{stdout}");

    let test = phase("test", &config, &out);
    assert!(test.status.success(), "{}", String::from_utf8_lossy(&test.stderr));
    let stdout = String::from_utf8_lossy(&test.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("step=1 ")));
    assert!(stdout.contains("mean_reward="));

    for f in [
        "market_episode.csv",
        "bench_fit.csv",
        "training_summary.json",
        "eval_curves.csv",
        "trace_t0_s0.csv",
        "validation.csv",
        "best_agent.vfck",
        "test_steps.csv",
        "test_summary.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn missing_config_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = phase("bench", &dir.path().join("absent.json"), dir.path());
    assert!(!o.status.success());
    assert_eq!(error_line(&o)["error"], "io");
}

#[test]
fn invalid_config_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"algorithm\": \"ddpg\"}").unwrap();
    let o = phase("train", &path, dir.path());
    assert!(!o.status.success());
    assert_eq!(error_line(&o)["error"], "json");
}

#[test]
fn test_before_validate_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let o = phase("test", &config, &dir.path().join("empty"));
    assert!(!o.status.success());
    let e = error_line(&o);
    assert_eq!(e["error"], "checkpoint");
    assert!(e["message"].as_str().unwrap().contains("validate"));
}
