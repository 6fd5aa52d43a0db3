use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 14] = [
    "--override",
    "env.ctc.n_hunters=2",
    "--override",
    "env.ctc.n_unsafe=1",
    "--override",
    "env.bounds=[0.6]",
    "--override",
    "algo.hidden=[8]",
    "--override",
    "algo.batch_size=8",
    "--override",
    "run.episodes=4",
    "--override",
    "run.eval_interval=2",
];

fn decom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decom"))
        .args(args)
        .env_remove("DECOM_SEED")
        .output()
        .expect("binary runs")
}

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--preset", "ctc-safe", "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(["--override", "run.eval_episodes=1"]);
    args.extend(extra);
    decom(&args)
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn train_writes_resolved_config_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--override", "algo.lambda=0.25"]);
    assert!(out.status.success(), "{}", text(&out));
    let resolved = fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    assert!(resolved.contains("lambda = 0.25"), "{resolved}");
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("episode,seed,variant,reward_mean,reward_std"));
    // Header plus two evaluations for each of the preset's three seeds.
    assert_eq!(metrics.lines().count(), 7);
    for seed in 0..3 {
        assert!(dir.path().join(format!("seed_{seed}/final.ckpt")).is_file());
    }
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--preset", "ctc-safe", "--out", dir.path().to_str().unwrap()];
    args.extend(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_decom"))
        .args(&args)
        .env("DECOM_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    assert!(dir.path().join("seed_11").is_dir());
    assert!(!dir.path().join("seed_0").exists());
}

#[test]
fn wrong_bound_count_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--override", "env.bounds=[0.6, 0.6]"]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    assert!(text(&out).contains("env.bounds"));
}

#[test]
fn unknown_override_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--override", "algo.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn eval_reads_checkpoint_and_finds_config() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), &[]).status.success());
    let ck = dir.path().join("seed_0/final.ckpt");
    let out = decom(&["eval", ck.to_str().unwrap(), "--episodes", "3"]);
    assert!(out.status.success(), "{}", text(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "episodes,reward_mean,reward_std,cost_1_mean,cost_1_std");
    assert!(lines[1].starts_with("3,"));

    let out = decom(&["eval", ck.to_str().unwrap(), "--episodes", "0"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn eval_of_a_missing_checkpoint_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), &[]).status.success());
    let out = decom(&["eval", dir.path().join("seed_0/nope.ckpt").to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn plot_is_stable_and_draws_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), &[]).status.success());
    let csv = dir.path().join("metrics.csv");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = decom(&["plot", csv.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o));
    }
    for f in ["reward.svg", "cost_1.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let cost = fs::read_to_string(a.join("cost_1.svg")).unwrap();
    assert!(cost.contains(r#"class="bound""#));
    assert!(cost.contains("D = 0.6"));
    assert!(!fs::read_to_string(a.join("reward.svg")).unwrap().contains(r#"class="bound""#));
}

#[test]
fn plot_rejects_a_csv_without_required_columns() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "episode,reward\n1,2\n").unwrap();
    let out = decom(&["plot", bad.to_str().unwrap(), "--out", dir.path().join("p").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("seed"));
}

#[test]
fn verify_passes_quick_checks_and_flags_a_gradient_fault() {
    let ok = decom(&["verify"]);
    assert!(ok.status.success(), "{}", text(&ok));
    assert_eq!(String::from_utf8_lossy(&ok.stdout).matches("PASS").count(), 9);

    let bad = decom(&["verify", "--inject-gradient-fault"]);
    assert_eq!(bad.status.code(), Some(3), "{}", text(&bad));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn sweep_writes_one_run_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--preset", "ctc-safe", "--lambdas", "0,0.5", "--out", dir.path().to_str().unwrap()];
    args.extend(TINY);
    args.extend(["--override", "run.eval_episodes=1"]);
    let out = decom(&args);
    assert!(out.status.success(), "{}", text(&out));
    assert!(dir.path().join("lambda_0/metrics.csv").is_file());
    assert!(dir.path().join("lambda_0.5/metrics.csv").is_file());
    let s = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(s.lines().count(), 3);
    assert!(s.starts_with("lambda,reward_mean,reward_std,cost_1"));
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = decom(&["train"]);
    assert_eq!(out.status.code(), Some(2));
}
