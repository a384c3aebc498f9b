use std::path::Path;
use std::process::{Command, Output};

fn egcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egcbf")).args(args).env("RUST_LOG", "error").output().expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        r#"
[world]
num_agents = 4
side_length = 1.5
num_obstacles = 2
episode_len = 40

[net]
d_model = 8
d_ff = 12
head_hidden = 8

[train]
iterations = 2
episodes = 2
rollout_steps = 4
horizon = 4
batch_snapshots = 4
eval_every = 1
eval_episodes = 1

[eval]
episodes = 2
sizes = [4, 6]
workers = 2
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn check_suites_pass_and_print_json() {
    let out = egcbf(&["check", "group", "qp", "haar"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 5);
    assert!(lines.iter().all(|v| v["passed"] == true));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(egcbf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(egcbf(&["check", "nonsense"]).status.code(), Some(1));
    assert_eq!(egcbf(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    // the learned method needs a checkpoint
    let out = egcbf(&["sweep", "--set", "eval.methods=[\"learned\"]", "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    // unknown config keys are rejected
    let out = egcbf(&["sweep", "--set", "world.bogus=1", "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = egcbf(&["sweep", "-c", &cfg, "--set", "eval.methods=[\"ccbf\", \"dcbf\", \"nominal\"]", "-o", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(out_dir.join("results.csv")).unwrap(), std::fs::read(out_dir.join("manifest.json")).unwrap())
    };
    let (a, ma) = run("a");
    let (b, mb) = run("b");
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("method,N,density,safe,reach,succ,cost_mean,cost_p25,cost_p75,reward"));
    assert_eq!(text.lines().count(), 1 + 3 * 2);
}

#[test]
fn train_then_eval_with_logs_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let train_dir = dir.path().join("train");
    let out = egcbf(&["train", "-c", &cfg, "-o", train_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "train_state.bin", "curve.csv", "manifest.json"] {
        assert!(train_dir.join(f).exists(), "{f} missing");
    }
    let curve = std::fs::read_to_string(train_dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);

    // resuming continues the iteration count
    let resumed = dir.path().join("resumed");
    let state = train_dir.join("train_state.bin");
    let out = egcbf(&["train", "-c", &cfg, "--resume", state.to_str().unwrap(), "-o", resumed.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(resumed.join("curve.csv")).unwrap();
    assert!(curve.lines().nth(1).unwrap().starts_with("2,"));

    let eval_dir = dir.path().join("eval");
    let ckpt = train_dir.join("checkpoint.bin");
    let out = egcbf(&[
        "eval",
        "-c",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--set",
        "eval.methods=[\"learned\", \"nominal\"]",
        "--log",
        "-o",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = eval_dir.join("traj_learned_1000.jsonl");
    assert!(log.exists());
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1 + 40);

    let out = egcbf(&["replay", log.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("seed 1000 steps 40"));
}
