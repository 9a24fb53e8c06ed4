use std::process::Command;

fn mcofl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcofl"))
}

#[test]
fn check_subcommands_pass() {
    for sub in ["tabular-verify", "bound-check", "gradcheck", "hvi"] {
        let out = mcofl().args([sub, "--seed", "3"]).output().unwrap();
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(out.status.success(), "{sub}: {text}{}", String::from_utf8_lossy(&out.stderr));
        assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
    }
}

#[test]
fn run_then_hvi_over_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "episodes = 2\nrounds_per_episode = 3\n").unwrap();
    let out_dir = dir.path().join("runs");
    let status = mcofl()
        .args(["run", "--policy", "uniform_q", "--seeds", "0..=1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    for s in 0..2 {
        assert!(out_dir.join(format!("uniform_q_seed{s}.csv")).exists());
        assert!(out_dir.join(format!("uniform_q_seed{s}.jsonl")).exists());
    }
    assert!(out_dir.join("summary.json").exists());
    let out = mcofl().arg("hvi").arg("--out").arg(&out_dir).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("uniform_q"));
}

#[test]
fn compare_prints_each_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "episodes = 1\nrounds_per_episode = 2\n").unwrap();
    let out = mcofl()
        .args(["compare", "--policy", "fixed", "--policy", "heuristic", "--seed", "5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("cmp"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("fixed") && text.contains("heuristic"));
}

#[test]
fn bad_input_exits_nonzero() {
    let out = mcofl().args(["run", "--policy", "mappo"]).output().unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "q_min = 1\n").unwrap();
    let out = mcofl().args(["run", "--policy", "fixed", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("q_min"));
}
