use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny.toml")
}

fn difflare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difflare"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stage(cmd: &str, out: &Path) -> Output {
    difflare(&[cmd, "--config", tiny_config().to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn help_lists_every_subcommand() {
    let out = difflare(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "train-vq", "train-diffusion", "train-sgim", "train-affm", "infer", "eval"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "preset = \"ci\"\n[vq]\nstepz = 1\n").unwrap();
    let out = difflare(&["synth", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    let both = difflare(&["synth", "--config", bad.to_str().unwrap(), "--preset", "ci"]);
    assert_eq!(both.status.code(), Some(2));
    assert_eq!(difflare(&["synth", "--preset", "huge"]).status.code(), Some(2));
}

#[test]
fn missing_stage_exits_with_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    assert!(stage("synth", dir.path()).status.success());
    let out = stage("train-diffusion", dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-vq"));
}

#[test]
fn tiny_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["synth", "train-vq", "train-diffusion", "train-sgim", "train-affm"] {
        let out = stage(cmd, dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let cfg = tiny_config();
    let root = dir.path().to_str().unwrap();
    let eval = difflare(&["eval", "--config", cfg.to_str().unwrap(), "--out", root, "--guidance-scale", "0.5"]);
    assert!(eval.status.success());
    let table = String::from_utf8_lossy(&eval.stdout);
    for v in ["input", "no-affm", "unguided-affm", "full"] {
        assert!(table.contains(v), "{v} missing:\n{table}");
    }

    let restored = dir.path().join("restored");
    let input = dir.path().join("corpus/test/000-input.png");
    let out = difflare(&[
        "infer",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root,
        "--prompt-token",
        "null",
        "--output",
        restored.to_str().unwrap(),
        input.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(restored.join("000-input.png").exists());
}
