use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dojo-cli")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().expect("exit code"), text)
}

fn write_config(dir: &Path, mut cfg: Value) -> String {
    cfg["output_dir"] = json!(dir.join("out"));
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn box_drop_succeeds_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"scenario": "box_drop", "h": 0.01, "T": 300}));
    let (code, text) = run(&["run", &cfg]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("PASS min_phi"));
    for f in ["drop_h0.1.csv", "drop_h0.01.csv", "drop.gp"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
}

#[test]
fn failed_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // one step is far too short for the box to land
    let cfg = write_config(dir.path(), json!({"scenario": "box_drop", "h": 0.01, "T": 1}));
    let (code, text) = run(&["run", &cfg]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("FAIL"));
}

#[test]
fn solver_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"scenario": "box_drop", "h": 0.01, "T": 300, "solver": {"max_iterations": 1}}),
    );
    let (code, text) = run(&["run", &cfg]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("at step"), "{text}");
}

#[test]
fn invalid_input_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(&["run", &dir.path().join("missing.json").to_string_lossy()]);
    assert_eq!(code, 3);
    let cfg = write_config(dir.path(), json!({"scenario": "box_drop", "h": -0.01, "T": 10}));
    assert_eq!(run(&["run", &cfg]).0, 3);
    let cfg = write_config(dir.path(), json!({"scenario": "box_drop", "h": 0.01, "T": 10, "bogus": 1}));
    assert_eq!(run(&["run", &cfg]).0, 3);
    let cfg = write_config(
        dir.path(),
        json!({"scenario": "box_drop", "h": 0.01, "T": 10, "mechanism_file": dir.path().join("nope.json")}),
    );
    assert_eq!(run(&["run", &cfg]).0, 3);
}

#[test]
fn gen_data_then_sysid_from_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"scenario": "sysid", "h": 0.01, "T": 12, "seed": 1,
               "sysid": {"n_traj": 2, "perturbation": 0.0, "max_gn_iters": 2}}),
    );
    let (code, text) = run(&["gen-data", &cfg]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("20 triplets"), "{text}");
    let data = dir.path().join("out").join("dataset.csv");
    let (code, text) = run(&["sysid", &data.to_string_lossy(), &cfg]);
    assert_eq!(code, 0, "{text}");
    assert!(dir.path().join("out").join("sysid_result.json").is_file());
    assert!(dir.path().join("out").join("sysid_trace.csv").is_file());
}

#[test]
fn grad_sweep_writes_one_column_per_kappa() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"scenario": "grad_sweep", "h": 0.1, "T": 1, "sweep": {"samples": 7, "force_max": 30.0}}),
    );
    let (code, text) = run(&["run", &cfg]);
    assert!(code == 0 || code == 1, "{text}");
    let csv = std::fs::read_to_string(dir.path().join("out").join("grad_sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 4);
    assert_eq!(lines.count(), 7);
}
