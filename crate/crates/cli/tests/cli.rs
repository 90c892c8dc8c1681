use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# tiny run for the command-line tests
synth.users = 30
synth.items = 90
synth.median_interactions = 12
dataset.users = 30
dataset.hot_count = 15
train.dim = 8
train.hidden = 16,8
train.global_epochs = 2
train.batch_size = 8
seeds = 7
";

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedrec-lab"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_cfg(dir: &Path, body: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn defaults_print_a_parsable_config() {
    let out = lab(&["defaults"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("train.global_epochs=20"), "{text}");
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &text);
    // the printed defaults are accepted back as a config file
    let out = lab(&["run", &cfg, "--set", "train.global_epochs=0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "epochs 0 must be rejected by validation");
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "train.no_such_knob = 3\n");
    let out = lab(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.no_such_knob"));
}

#[test]
fn missing_file_and_bad_override_exit_with_two() {
    assert_eq!(lab(&["run", "/nonexistent/run.cfg"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    assert_eq!(lab(&["run", &cfg, "--set", "novalue"]).status.code(), Some(2));
    assert_eq!(lab(&["run", &cfg, "--mode", "bogus"]).status.code(), Some(2));
    assert_eq!(lab(&["run", &cfg, "--set", "attack.fraction=2"]).status.code(), Some(2));
}

#[test]
fn manifest_rerun_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let first = dir.path().join("first");
    let out = lab(&["run", &cfg, "--set", "contrastive.enabled=true", "--out", first.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "metrics.csv", "attack_trace.csv", "defense_trace.csv", "summary.csv"] {
        assert!(first.join(f).exists(), "missing {f}");
    }
    let second = dir.path().join("second");
    let manifest = first.join("manifest.json");
    let out = lab(&["run", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(first.join("metrics.csv")).unwrap(), fs::read(second.join("metrics.csv")).unwrap());
}
