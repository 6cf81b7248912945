use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conic-dispersion"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn normal_form_passes_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["normal-form"], dir.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.contains("PASS improved_decay"));
    let run = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("normal-form-"));
    assert!(run.join("manifest.json").exists());
    assert!(run.join("normal_form.csv").exists());
}

#[test]
fn unknown_key_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[experiment.flow]\nsampels = 3\n").unwrap();
    let o = cli(&["flow", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:2:1: unknown key `experiment.flow.sampels`"), "{err}");
}

#[test]
fn syntax_error_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("broken.toml");
    std::fs::write(&cfg, "seed = 1\n[metric\n").unwrap();
    let o = cli(&["flow", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn bad_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["flow", "--set", "samples=many"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("experiment.flow.samples"));
}

#[test]
fn config_prints_merged_tree() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["config", "--set", "metric.nu=0.5"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("nu = 0.5"), "{text}");
}

#[test]
fn gate_failure_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["flow", "--set", "metric.nu=0", "--set", "samples=20"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL symbol_class"));
}
