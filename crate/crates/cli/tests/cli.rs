use std::process::Command;

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latentforge"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli().arg("no-such-command").status().unwrap().code(), Some(1));
    assert_eq!(cli().args(["gen-world", "--seed", "x"]).status().unwrap().code(), Some(1));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "unlearn.c = -1\n").unwrap();
    let out = cli().args(["gen-world", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains('c'));
    let out = cli().args(["unlearn", "--method", "sgd"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = cli().arg("gen-world").env("LATENTFORGE_THREADS", "0").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = cli().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    for sub in ["gen-world", "pretrain", "train-sae", "find-latents", "unlearn", "evaluate", "oracle", "run-all", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn stage_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let ok = cli().arg("gen-world").arg("--out").arg(&out).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(out.join("world/world.txt").exists());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("40 known"));
    // an unknown target is only detected once the world exists
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, "lm.epochs = 1\nlm.d = 8\nlm.layers = 2\nsae.epochs = 1\n").unwrap();
    let bad = cli()
        .args(["find-latents", "--target", "nobody here"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad.stderr));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("target"));
    // report without a stored evaluation is a stage failure too
    let missing = cli().arg("report").arg("--out").arg(dir.path().join("empty")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}
