use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn horizonlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_horizonlab"))
        .args(args)
        .env_remove("HORIZONLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn negative_tolerance_is_a_validation_error() {
    let out = horizonlab(&["--task", "value", "--tol", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tolerance"));
}

#[test]
fn unknown_task_is_a_validation_error() {
    let out = horizonlab(&["--task", "spectral"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown task"));
}

#[test]
fn missing_config_is_a_validation_error() {
    let out = horizonlab(&["--config", "/nonexistent/config.json", "--task", "value"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_validation_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_horizonlab"))
        .args(["--task", "value"])
        .env("HORIZONLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_step_value_is_one_running_cost() {
    let dir = tempfile::tempdir().unwrap();
    let out = horizonlab(&["--task", "value", "--grid", "0.01,0.01,0.01", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(dir.path());
    let v = s["results"]["value_at_initial"].as_f64().unwrap();
    // min over u in [-1/2, 1/2] of 2u + |u| - 1 is -3/2 at u = -1/2.
    assert!((v - 0.01 * -1.5).abs() < 1e-12, "{v}");
    assert_eq!(s["seed"], 7);
    assert!(dir.path().join("value_table.csv").exists());
}

#[test]
fn overflowing_cost_is_a_solver_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"problem": {"name": "capital-stock"}, "task": "value", "grid": {"h": 1e199, "dt": 0.1, "horizon": 1, "lower": [-1e200], "upper": [1e200]}}"#,
    )
    .unwrap();
    let out = horizonlab(&["--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reruns_are_byte_identical_and_manifest_is_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = horizonlab(&["--task", "limits", "--seed", "11", "--grid", "0.02,0.02,8", "--horizons", "2,2,3", "--out", d.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["convergence.csv", "plot_value_vs_horizon.csv", "summary.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    let listed: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|o| o["file"].as_str().unwrap()).collect();
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name != "manifest.json" {
            assert!(listed.contains(&name.as_str()), "{name} missing from manifest");
        }
    }
    for o in manifest["outputs"].as_array().unwrap() {
        let bytes = fs::read(a.path().join(o["file"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    let plot = fs::read_to_string(a.path().join("plot_value_vs_horizon.csv")).unwrap();
    assert!(plot.starts_with("series,x,y\nV_all,"));
}

#[test]
fn plot_data_needs_reports() {
    let empty = tempfile::tempdir().unwrap();
    let out = horizonlab(&["--task", "plot-data", "--out", empty.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = horizonlab(&["--task", "regularity", "--problem", "capital-stock", "--grid", "0.02,0.02,4", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read(dir.path().join("plot_region_map.csv")).unwrap();
    let again = tempfile::tempdir().unwrap();
    fs::copy(dir.path().join("region_map.csv"), again.path().join("region_map.csv")).unwrap();
    let out = horizonlab(&["--task", "plot-data", "--out", again.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(first, fs::read(again.path().join("plot_region_map.csv")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.lines().skip(1).all(|l| matches!(l.rsplit(',').next(), Some("0" | "1" | "2" | "3"))));
}

#[test]
fn example_suite_bundles_limits_certificate_and_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let out = horizonlab(&["--task", "example-suite", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(dir.path());
    let r = &s["results"];
    let offset = (2f64.ln() - 1.0) / 2.0;
    assert!((r["limits"]["v_all"]["limit"].as_f64().unwrap() - (-1.0 + offset)).abs() < 2e-2);
    assert!((r["limits"]["v_inf"]["limit"].as_f64().unwrap() + 1.0).abs() < 2e-2);
    assert_eq!(r["pmp"]["certificate"]["found"], true);
    let entries = r["criteria"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 5);
    assert!(entries.iter().all(|e| e["verdict"] == "pass"));
    for f in ["costate_arc.csv", "criteria.csv", "plot_costate.csv", "plot_residual_vs_T.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
