use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_density-ocp"))
        .args([cmd, "--config"])
        .arg(config("scalar.json"))
        .arg("--output-dir")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn fitted() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    for cmd in ["gen-data", "fit"] {
        let o = run(cmd, &out, &[]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    (dir, out)
}

fn write_f64s(path: &Path, values: &[f64]) {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).unwrap();
}

#[test]
fn invalid_configs_exit_with_validation_code() {
    let dir = TempDir::new().unwrap();
    for bad in [
        "ocp.r=-1",
        "system=\"pendulum\"",
        "dictionary.delta=0",
        "unknown_field=1",
        "data.dt=0",
    ] {
        let o = run("gen-data", dir.path(), &["--set", bad]);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{bad}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn check_passes_on_fresh_artifacts() {
    let (_dir, out) = fitted();
    let o = run("check", &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
}

#[test]
fn negative_operator_entry_fails_check() {
    let (_dir, out) = fitted();
    let path = out.join("operators/P0_hat.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes[..8].copy_from_slice(&(-0.5f64).to_le_bytes());
    fs::write(&path, bytes).unwrap();
    let o = run("check", &out, &[]);
    assert_eq!(o.status.code(), Some(4));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("operators.P0.nonnegative"), "{stdout}");
}

#[test]
fn truncated_operator_fails_check() {
    let (_dir, out) = fitted();
    let path = out.join("operators/P1_hat.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert_eq!(run("check", &out, &[]).status.code(), Some(4));
}

#[test]
fn identity_lambda_fails_check() {
    let (_dir, out) = fitted();
    let path = out.join("operators/Lambda.bin");
    let n = ((fs::read(&path).unwrap().len() / 8) as f64).sqrt() as usize;
    let identity: Vec<f64> = (0..n * n)
        .map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    write_f64s(&path, &identity);
    let o = run("check", &out, &[]);
    assert_eq!(o.status.code(), Some(4));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("cost.Lambda"), "{stdout}");
}

#[test]
fn artifacts_from_another_config_fail_check() {
    let (_dir, out) = fitted();
    let o = run("check", &out, &["--set", "ocp.r=2"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stdout).contains("artifacts.config_hash"));
}

#[test]
fn check_on_empty_directory_fails() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run("check", dir.path(), &[]).status.code(), Some(4));
}

#[test]
fn solve_before_fit_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let o = run("solve", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
