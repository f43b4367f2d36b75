use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
[data]
n = 200
[noise]
kinds = sym
rates = 0.3
[base]
epochs = 2
[lsnpc]
epochs = 1
semi_epochs = 1
[correction]
methods = baseline, lsnpc
[run]
seeds = 1
";

fn lsnpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsnpc")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.ini");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&lsnpc(&["--help"])), 0);
    assert_eq!(code(&lsnpc(&["--version"])), 0);
    assert_eq!(code(&lsnpc(&["run-all", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&lsnpc(&[])), 1);
    assert_eq!(code(&lsnpc(&["frobnicate"])), 1);
    assert_eq!(code(&lsnpc(&["eval", "--seed", "x"])), 1);
    let missing = lsnpc(&["eval"]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--config"));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\ncolour = blue\n");
    assert_eq!(code(&lsnpc(&["gen-data", "--config", &cfg])), 1);
    let absent = dir.path().join("absent.ini");
    assert_eq!(code(&lsnpc(&["gen-data", "--config", absent.to_str().unwrap()])), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    // Corrupting before any data exists fails on the missing file.
    let r = lsnpc(&["corrupt", "--quiet", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 2, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn stages_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for stage in ["gen-data", "corrupt", "train-base", "train-lsnpc", "correct"] {
        let r = lsnpc(&[stage, "--quiet", "--config", &cfg, "--out", out]);
        assert_eq!(code(&r), 0, "{stage}: {}", String::from_utf8_lossy(&r.stderr));
    }
    let r = lsnpc(&["eval", "--config", &cfg, "--out", out]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report = String::from_utf8(r.stdout).unwrap();
    assert!(report.contains("LSNPC"), "{report}");
    assert!(Path::new(out).join("manifest.txt").is_file());
}
