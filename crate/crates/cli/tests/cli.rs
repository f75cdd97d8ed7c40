use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_inertial"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("out").join(name)).unwrap()
}

/// Data rows of a CSV written by the runner, header comments stripped.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

const ROTATING: &str = r#"{
  "problem": {"name": "rotating_2d"},
  "manifold": {"y0": [0.6], "horizon": 1.0, "what_boundary": [[0.3]]},
  "sweep": {"horizons": [0.4, 0.8, 1.2, 1.6]},
  "trajectory": {"dt": 0.01, "steps": 4, "scheme": "ab2"}
}"#;

#[test]
fn manifold_point_writes_point_and_path() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["manifold-point"], ROTATING);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(dir.path(), "manifold_point.csv");
    assert!(text.starts_with("# inertial "));
    assert!(text.contains("# command: manifold-point"));
    let r = rows(&text);
    assert_eq!(r.len(), 1);
    let y: f64 = r[0][2].parse().unwrap();
    assert!((y - 0.6).abs() < 1e-3);
    assert!(rows(&read(dir.path(), "manifold_path.csv")).len() >= 8);
}

#[test]
fn sweep_is_identical_across_worker_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, ROTATING).unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "3", "1"] {
        let out = dir.path().join(format!("out{}", outputs.len()));
        let o = Command::new(env!("CARGO_BIN_EXE_inertial"))
            .args(["sweep", "--workers", workers, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((fs::read(out.join("sweep.csv")).unwrap(), fs::read(out.join("sweep_knee.csv")).unwrap()));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let text = String::from_utf8(outputs[0].0.clone()).unwrap();
    let r = rows(&text);
    assert_eq!(r.len(), 4);
    let horizons: Vec<f64> = r.iter().map(|row| row[1].parse().unwrap()).collect();
    assert_eq!(horizons, vec![0.4, 0.8, 1.2, 1.6]);
    assert!(r.iter().all(|row| row[2] == "ok"));
}

#[test]
fn trajectory_counts_solves() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["trajectory"], ROTATING);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&read(dir.path(), "trajectory.csv"));
    assert_eq!(r.len(), 5);
    let t: Vec<f64> = r.iter().map(|row| row[1].parse().unwrap()).collect();
    assert!((t[4] - 0.04).abs() < 1e-12);
    assert!(r[..4].iter().all(|row| row.last().unwrap() == "1"));
}

#[test]
fn tbound_reproduces_worked_example() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"tbound": {"alpha": -10, "beta": -1, "l": 0.5, "tol": 1e-6, "horizons": [1, 2]}}"#;
    let o = run(dir.path(), &["tbound"], cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&read(dir.path(), "tbound.csv"));
    let kappa: f64 = r[0][5].parse().unwrap();
    let t_min: f64 = r[0][9].parse().unwrap();
    assert!((kappa - 1.0 / 9.0).abs() < 1e-15);
    assert!((t_min - 2.633).abs() < 1e-3);
    assert_eq!(rows(&read(dir.path(), "tbound_horizons.csv")).len(), 2);
}

#[test]
fn decouple_recovers_diagonal_rates() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{
      "problem": {"name": "linear_benchmark", "a": [-10], "b": [-1]},
      "decouple": {"p": 1, "t1": 20, "what0": [[0.2]], "samples": 21, "estimate_radius": 0.1}
    }"#;
    let o = run(dir.path(), &["decouple"], cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let avg = rows(&read(dir.path(), "decouple_averages.csv"));
    let slow: f64 = avg[0][2].parse().unwrap();
    assert!((slow + 1.0).abs() < 1e-2, "{slow}");
    let g = rows(&read(dir.path(), "gapdata.csv"));
    assert_eq!(g.len(), 1);
    assert_eq!(rows(&read(dir.path(), "decouple.csv")).len(), 21);
}

#[test]
fn header_records_resolved_lorenz_parameters() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{
      "problem": {"name": "two_layer_lorenz"},
      "manifold": {"y0": "alternating", "p": 5, "horizon": 0.001, "ivp_rtol": 1e-4, "ivp_atol": 1e-7}
    }"#;
    let o = run(dir.path(), &["manifold-point"], cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(dir.path(), "manifold_point.csv");
    let problem = text.lines().find(|l| l.starts_with("# problem: ")).unwrap();
    let params: serde_json::Value = serde_json::from_str(&problem["# problem: ".len()..]).unwrap();
    assert_eq!(params["F"], 8.0);
    assert_eq!(params["K"], 5);
    assert!(text.lines().any(|l| l.starts_with("# config: ") && l.contains("\"eps\":0.5")));
}

#[test]
fn random_boundary_frames_follow_the_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{
      "problem": {"name": "linear_benchmark", "a": [-10, -6], "b": [-1, -0.5]},
      "decouple": {"p": 2, "t1": 1, "what0": "random", "samples": 3}
    }"#;
    let path = dir.path().join("config.json");
    fs::write(&path, cfg).unwrap();
    let sample = |seed: &str| {
        let out = dir.path().join(format!("seed{seed}"));
        let o = Command::new(env!("CARGO_BIN_EXE_inertial"))
            .args(["decouple", "--seed", seed, "--config"])
            .arg(&path)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        let text = fs::read_to_string(out.join("decouple.csv")).unwrap();
        rows(&text)
    };
    assert_eq!(sample("7"), sample("7"));
    assert_ne!(sample("7"), sample("8"));
}

#[test]
fn unknown_field_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["manifold-point"], r#"{"problem": {"name": "rotating_2d", "sigmaa": 0.1}, "manifold": {"y0": [1]}}"#);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigmaa"));
    let o = run(dir.path(), &["tbound"], r#"{"tbound": {"alpha": -10, "beta": -1, "l": 0.5, "tol": 1e-6, "extra": 1}}"#);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_inputs_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["manifold-point"], r#"{"problem": {"name": "rotating_2d"}, "manifold": {"y0": [1, 2]}}"#);
    assert_eq!(code(&o), 2);
    let o = run(dir.path(), &["tbound"], r#"{"tbound": {"alpha": -1, "beta": -0.9, "l": 5, "tol": 1e-6}}"#);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gap"));
    let o = run(dir.path(), &["trajectory"], r#"{"problem": {"name": "rotating_2d"}, "manifold": {"y0": [0.5]}, "trajectory": {"dt": 0.1, "steps": 1, "scheme": "rk4"}}"#);
    assert_eq!(code(&o), 2);
}

#[test]
fn solver_failure_exits_with_code_three() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"problem": {"name": "rotating_2d"}, "manifold": {"y0": [0.6], "horizon": 1.0, "bvp_tol": 1e-12, "max_nodes": 10}}"#;
    let o = run(dir.path(), &["manifold-point"], cfg);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn partial_sweep_exits_with_code_four_and_keeps_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{
      "problem": {"name": "rotating_2d"},
      "manifold": {"y0": [1.0], "what_boundary": [[0.3]]},
      "sweep": {"horizons": [0.5, 3.0]}
    }"#;
    let o = run(dir.path(), &["sweep"], cfg);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&read(dir.path(), "sweep.csv"));
    assert_eq!(r[0][2], "ok");
    assert_eq!(r[1][2], "failed");
    assert!(!r[1][7].is_empty());
}
