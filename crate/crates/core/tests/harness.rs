use conic_dispersion::harness::persist::read_manifest;
use conic_dispersion::harness::{run, ConfigTree, Experiment};

fn small() -> ConfigTree {
    let mut t = ConfigTree::reference();
    t.set("samples=60", Some("flow")).unwrap();
    t.set("trajectory_samples=2", Some("flow")).unwrap();
    t
}

#[test]
fn repeated_runs_write_identical_csvs() {
    let tree = small();
    for exp in [Experiment::Flow, Experiment::Transport] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run(exp, &tree, a.path()).unwrap();
        let rb = run(exp, &tree, b.path()).unwrap();
        assert!(!ra.manifest.outputs.is_empty());
        assert_eq!(ra.manifest.outputs, rb.manifest.outputs, "{exp}");
        let csv = std::fs::read_to_string(ra.dir.join(&ra.manifest.outputs[0].path)).unwrap();
        assert!(csv.starts_with("# schema=1\n"));
    }
}

#[test]
fn manifest_reproduces_config() {
    let tree = small();
    let dir = tempfile::tempdir().unwrap();
    let out = run(Experiment::Flow, &tree, dir.path()).unwrap();
    let m = read_manifest(&out.dir.join("manifest.json")).unwrap();
    assert_eq!(m, out.manifest);
    assert_eq!(ConfigTree::from_json(&m.config).unwrap(), tree);
    assert_eq!(m.parameters["experiment"]["samples"], 60);
    assert!(m.pass);
}

#[test]
fn nonpositive_decay_order_is_gated() {
    let mut tree = small();
    tree.set("metric.nu=0", None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run(Experiment::Flow, &tree, dir.path()).unwrap();
    assert!(!out.pass());
    assert!(out.manifest.outputs.is_empty());
    let gate: Vec<_> = out.manifest.checks.iter().filter(|c| c.id.starts_with("symbol_class")).collect();
    assert_eq!(gate.len(), 2);
    assert!(gate.iter().all(|c| !c.pass && c.detail.contains("nu = 0")), "{gate:?}");
    assert_eq!(out.manifest.checks.len(), 2);
}

#[test]
fn flat_metric_skips_perturbed_runs() {
    let mut tree = small();
    tree.set("metric.family=flat", None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run(Experiment::Transport, &tree, dir.path()).unwrap();
    assert!(out.pass());
    assert!(out.manifest.checks.iter().all(|c| c.metric == "flat"));
}
