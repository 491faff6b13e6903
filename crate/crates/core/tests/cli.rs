use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ltaug::cli::run_cli;

fn ltaug(dir: &Path, args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ltaug"));
    cmd.args(args).current_dir(dir).env("RUST_LOG", "warn");
    match seed {
        Some(s) => cmd.env("LTAUG_SEED", s),
        None => cmd.env_remove("LTAUG_SEED"),
    };
    cmd.output().unwrap()
}

fn small_config(dir: &Path) {
    let cfg = r#"{
        "output_dir": "out",
        "synth": {"head_count": 30, "tail_count": 5, "test_count": 4},
        "partition": {"threshold": 10}
    }"#;
    fs::write(dir.join("c.json"), cfg).unwrap();
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(run_cli(["ltaug", "frobnicate", "--config", "c.json"]), 2);
    assert_eq!(run_cli(["ltaug"]), 2);
}

#[test]
fn missing_config_exits_1() {
    assert_eq!(
        run_cli(["ltaug", "synth", "--config", "/nonexistent/c.json"]),
        1
    );
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"cam": {"tau_l": 0.0}}"#).unwrap();
    let out = ltaug(dir.path(), &["synth", "--config", "bad.json"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cam.tau_l"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn synth_is_reproducible_and_seed_overridable() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let manifest = dir.path().join("out/data/manifest.json");

    assert_eq!(
        ltaug(dir.path(), &["synth", "--config", "c.json"], None)
            .status
            .code(),
        Some(0)
    );
    let first = fs::read(&manifest).unwrap();
    let tensor = dir.path().join("out/data/tensors/train_03_0000.lta");
    let first_tensor = fs::read(&tensor).unwrap();

    assert_eq!(
        ltaug(dir.path(), &["synth", "--config", "c.json"], None)
            .status
            .code(),
        Some(0)
    );
    assert_eq!(fs::read(&manifest).unwrap(), first);
    assert_eq!(fs::read(&tensor).unwrap(), first_tensor);

    assert_eq!(
        ltaug(dir.path(), &["synth", "--config", "c.json"], Some("7"))
            .status
            .code(),
        Some(0)
    );
    assert_ne!(fs::read(&tensor).unwrap(), first_tensor);

    let out = ltaug(dir.path(), &["synth", "--config", "c.json"], Some("seven"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LTAUG_SEED"));
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for sub in ["train", "cam", "augment", "eval", "report"] {
        let out = ltaug(dir.path(), &[sub, "--config", "c.json"], None);
        assert_eq!(out.status.code(), Some(1), "{sub}");
    }
}
