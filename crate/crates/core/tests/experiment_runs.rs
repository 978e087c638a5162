//! End-to-end runs of every experiment kind through the public driver.

use std::path::Path;

use singsys::experiment::{emit_plot_data, run, run_config, ExperimentConfig, GateStatus};

fn config(body: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(body).unwrap()
}

fn gate(out: &singsys::experiment::RunOutcome, name: &str) -> GateStatus {
    out.report.gates.iter().find(|g| g.name == name).unwrap_or_else(|| panic!("no gate {name}")).status
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn single_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("single");
    let path = dir.path().join("single.toml");
    std::fs::write(
        &path,
        format!(
            "kind = \"single\"\noutput_dir = {:?}\n[problem]\ngamma = 0.5\nr = 1.0\nv = 1.0\n",
            out_dir.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = run(&path).unwrap();
    assert_eq!(out.dir, out_dir);
    for f in ["u.csv", "trace.csv", "diagnostics.json"] {
        assert!(out_dir.join(f).is_file());
    }
    assert_eq!(gate(&out, "cap"), GateStatus::Pass);
    assert_eq!(gate(&out, "positivity"), GateStatus::Pass);
}

#[test]
fn sweep_writes_points_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "kind = \"sweep\"\noutput_dir = \"x\"\n[problem]\ngamma = 0.5\nr = 1.0\nresolution = 129\n\
         [sweep]\ngammas = [0.5, 1.0, 2.0, 2.9]\nrs = [1.0]\n",
    );
    let out = run_config(&cfg, dir.path()).unwrap();
    assert!(out.report.passed(), "{}", out.report.table());
    for i in 0..4 {
        assert!(dir.path().join(format!("point_{i:03}/u.csv")).is_file());
    }
    let summary = read(dir.path(), "summary.csv");
    let mut lines = summary.lines();
    let header = lines.next().unwrap();
    for col in ["gamma", "tau_fit", "h1", "iterations"] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
    assert_eq!(lines.count(), 4);
    let files = emit_plot_data(dir.path()).unwrap();
    assert_eq!(files.iter().filter(|f| f.ends_with("boundary_layer.csv")).count(), 4);
}

#[test]
fn refinement_dichotomy_gates() {
    let dir = tempfile::tempdir().unwrap();
    let strong = config(
        "kind = \"refinement\"\noutput_dir = \"x\"\n[problem]\ngamma = 2.5\nr = 1.0\n[sweep]\nresolutions = [129, 257, 513]\n",
    );
    let out = run_config(&strong, &dir.path().join("strong")).unwrap();
    assert_eq!(gate(&out, "energy_bound"), GateStatus::Pass);
    assert_eq!(gate(&out, "continuation_energy"), GateStatus::Pass);
    let dist = config(
        "kind = \"refinement\"\noutput_dir = \"x\"\n[problem]\ngamma = 4.0\nr = 1.0\n[sweep]\nresolutions = [129, 257, 513]\n",
    );
    let out = run_config(&dist, &dir.path().join("dist")).unwrap();
    assert_eq!(gate(&out, "global_energy_growth"), GateStatus::Pass);
    assert_eq!(gate(&out, "local_energy"), GateStatus::Pass);
    assert!(read(&dir.path().join("dist"), "refinement.csv").starts_with("resolution,h,h1,local_h1,u_linf\n"));
}

#[test]
fn saddle_run_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "kind = \"saddle\"\noutput_dir = \"x\"\nseed = 5\n[problem]\ngamma = 0.5\nr = 1.0\nresolution = 129\n\
         [schedule]\nn_values = [1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8]\n[diagnostics]\nsaddle_directions = 20\n",
    );
    let out = run_config(&cfg, dir.path()).unwrap();
    assert!(out.report.passed(), "{}", out.report.table());
    emit_plot_data(dir.path()).unwrap();
    let curves = read(dir.path(), "saddle_curves.csv");
    assert!(curves.starts_with("direction_id,t,J\n"));
    assert!(curves.contains("\nz_zero,") && curves.contains("\nw_double,"));
}

#[test]
fn uniqueness_run_with_and_without_gate() {
    let dir = tempfile::tempdir().unwrap();
    let gated = config("kind = \"uniqueness\"\noutput_dir = \"x\"\n[problem]\ngamma = 0.5\nr = 1.0\nresolution = 65\n");
    let out = run_config(&gated, &dir.path().join("a")).unwrap();
    assert_eq!(gate(&out, "uniqueness"), GateStatus::Pass);
    let open = config("kind = \"uniqueness\"\noutput_dir = \"x\"\n[problem]\ngamma = 0.5\nr = 0.75\nresolution = 65\n");
    let out = run_config(&open, &dir.path().join("b")).unwrap();
    assert_eq!(gate(&out, "uniqueness"), GateStatus::NotApplicable);
    assert!(dir.path().join("b/uniqueness.json").is_file());
}

#[test]
fn distributional_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("kind = \"distributional\"\noutput_dir = \"x\"\n[problem]\ngamma = 4.0\nr = 1.0\n");
    let out = run_config(&cfg, dir.path()).unwrap();
    assert!(out.report.passed(), "{}", out.report.table());
    assert_eq!(gate(&out, "eps_stabilization"), GateStatus::Pass);
    emit_plot_data(dir.path()).unwrap();
    assert!(read(dir.path(), "continuation_curve.csv").starts_with("n,H1\n"));
}

#[test]
fn coupled_two_dimensional_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("kind = \"coupled\"\noutput_dir = \"x\"\n[problem]\ngamma = 2.0\nr = 1.0\ndimension = 2\nresolution = 33\n");
    let out = run_config(&cfg, dir.path()).unwrap();
    assert!(out.report.passed(), "{}", out.report.table());
    assert_eq!(gate(&out, "hardy"), GateStatus::NotApplicable);
    assert_eq!(gate(&out, "barrier"), GateStatus::Pass);
}
