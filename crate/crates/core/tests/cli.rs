use std::path::Path;
use std::process::{Command, Output};

fn snadv(args: &[&str], cwd: &Path, root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snadv"))
        .args(args)
        .current_dir(cwd)
        .env("SNADV_OUT", root)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const KERNEL: &str = r#"{"geometry": {"in_channels": 1, "in_height": 8, "in_width": 8, "out_channels": 1,
  "kernel_height": 3, "kernel_width": 3, "stride_h": 1, "stride_w": 1, "padding": "same"},
  "kernel": [1, 1, 1, 1, 1, 1, 1, 1, 1]}"#;

#[test]
fn specnorm_prints_and_writes_under_output_root() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "k.json", KERNEL);
    let root = dir.path().join("root");
    let out = snadv(&["specnorm", "k.json", "--out", "audit/k.json"], dir.path(), &root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("audit/k.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    let op = printed["sigma_operator"].as_f64().unwrap();
    let flat = printed["sigma_kernel_flat"].as_f64().unwrap();
    assert!(op > 1.5 * flat);
    assert!((flat - 3.0).abs() < 1e-9);
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.json", r#"{"name": "x", "seed": 1}"#);
    let out = snadv(&["run", "bad.json"], dir.path(), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_files_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = snadv(&["run", "nope.json"], dir.path(), dir.path());
    assert_eq!(out.status.code(), Some(4));
    let out = snadv(&["specnorm", "nope.json"], dir.path(), dir.path());
    assert_eq!(out.status.code(), Some(4));
    write(dir.path(), "d.json", r#"{"kind": "synthetic", "classes": 2, "dim": 2, "n": 10, "separation": 1, "seed": 0}"#);
    let out = snadv(&["capacity", "missing.snwt", "d.json"], dir.path(), dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn invalid_kernel_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "k.json", &KERNEL.replace("[1, 1, 1, 1, 1, 1, 1, 1, 1]", "[1, 1]"));
    let out = snadv(&["specnorm", "k.json"], dir.path(), dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
      "name": "boom", "seed": 1, "output_dir": "boom",
      "dataset": {"kind": "synthetic", "classes": 2, "dim": 3, "n": 60, "separation": 2, "seed": 1},
      "network": {"input_shape": [3], "layers": [
        {"kind": "dense", "inputs": 3, "outputs": 4, "activation": "elu"},
        {"kind": "dense", "inputs": 4, "outputs": 2, "activation": "identity"}]},
      "train": {"optimizer": "sgd", "schedule": {"kind": "constant", "lr": 1e9},
                "batch_size": 8, "epochs": 2, "validation_size": 20},
      "beta_grid": [1.0]
    }"#;
    write(dir.path(), "boom.json", cfg);
    let root = dir.path().join("root");
    let out = snadv(&["run", "boom.json"], dir.path(), &root);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("boom/failure.json").exists());
}
