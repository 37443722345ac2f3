use std::path::{Path, PathBuf};

use beamkam::cli::{self, Cli, EXIT_OK, EXIT_VALIDATION};
use beamkam::config::RunConfig;
use clap::Parser;
use serde_json::Value;

fn r1() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/r1.json")
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["beamkam"];
    argv.extend_from_slice(args);
    cli::run(argv)
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(r1()).unwrap()).unwrap();
    edit(&mut v);
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    p
}

#[test]
fn shipped_config_matches_reference() {
    let text = std::fs::read_to_string(r1()).unwrap();
    let mut shipped = RunConfig::from_json(&text).unwrap();
    let reference = RunConfig::reference();
    shipped.output = reference.output.clone();
    assert_eq!(shipped, reference);
}

#[test]
fn solve_writes_certificate_and_solution() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let cfg = r1();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "--out", out, "solve"]), EXIT_OK);
    let cert = read(&tmp.path().join("certificate.json"));
    assert_eq!(cert["status"], "converged");
    assert!(cert["final_residual_s1"].as_f64().unwrap() <= 1e-10);
    assert!(cert["config"].is_object());
    let sol = read(&tmp.path().join("solution.json"));
    assert_eq!(sol["N"], 64);
    assert!(!sol["u"].as_array().unwrap().is_empty());
}

#[test]
fn missing_config_is_a_validation_error() {
    assert_eq!(run(&["--config", "/nonexistent/beamkam.json", "solve"]), EXIT_VALIDATION);
}

#[test]
fn bad_field_reports_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| v["solver"]["n0"] = Value::from("eight"));
    let cli = Cli::try_parse_from(["beamkam", "--config", cfg.to_str().unwrap(), "solve"]).unwrap();
    let err = cli::execute(&cli).unwrap_err();
    assert_eq!(err.code, EXIT_VALIDATION);
    assert!(format!("{:#}", err.error).contains("solver.n0"), "{:#}", err.error);
}

#[test]
fn oversized_epsilon_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| v["solver"]["eps"] = Value::from(5e-2));
    let out = tmp.path().join("out");
    let code = run(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "solve"]);
    assert_eq!(code, EXIT_VALIDATION);
}

#[test]
fn lambda_outside_the_interval_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| v["frequency"]["lambda"] = Value::from(2.0));
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "solve"]), EXIT_VALIDATION);
}

#[test]
fn bad_theta_modes_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let mut measures = Vec::new();
    for mode in ["exact", "sweep"] {
        let out = tmp.path().join(mode);
        let code = run(&["--out", out.to_str().unwrap(), "bad-theta", "--N", "4", "--j0", "0", "--mode", mode]);
        assert_eq!(code, EXIT_OK);
        let v = read(&out.join("bad_theta.json"));
        assert_eq!(v["mode"], mode);
        measures.push(v["total_measure"].as_f64().unwrap());
    }
    let res = 0.125 * 4f64.powf(-8.0);
    assert!((measures[0] - measures[1]).abs() <= 2.0 * res, "{measures:?}");
}

#[test]
fn scan_writes_csv_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["--out", out, "scan-lambda", "--N", "4", "--grid", "16", "--no-good"]), EXIT_OK);
    let csv = std::fs::read_to_string(tmp.path().join("scan.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "lambda,in_U,in_U_N,N_good,min_gap,min_eig");
    assert_eq!(lines.count(), 16);
    assert!(tmp.path().join("scan.json").exists());
}

#[test]
fn invert_matches_dense() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["--out", out, "invert", "--N", "6", "--theta", "0.3"]), EXIT_OK);
    let v = read(&tmp.path().join("invert.json"));
    let check = &v["dense_check"];
    assert!(check["relative_error_vs_dense"].as_f64().unwrap() <= 1e-8);
    assert!(check["residual_op"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn invert_reads_a_matrix_file() {
    let tmp = tempfile::tempdir().unwrap();
    let mut sites = Vec::new();
    let mut entries = Vec::new();
    for l in -2..=2 {
        for j in -2..=2 {
            let i = sites.len();
            sites.push(serde_json::json!({ "l": [l], "j": [j] }));
            entries.push(serde_json::json!([i, i, 3.0 + j as f64, 0.0]));
            if i > 0 {
                entries.push(serde_json::json!([i, i - 1, 0.1, 0.0]));
                entries.push(serde_json::json!([i - 1, i, 0.1, 0.0]));
            }
        }
    }
    let m = tmp.path().join("m.json");
    std::fs::write(&m, serde_json::json!({ "sites": sites, "entries": entries }).to_string()).unwrap();
    let out = tmp.path().join("out");
    let code = run(&["--out", out.to_str().unwrap(), "invert", "--matrix", m.to_str().unwrap(), "--N", "2"]);
    assert_eq!(code, EXIT_OK);
    let v = read(&out.join("invert.json"));
    assert!(v["dense_check"]["relative_error_vs_dense"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn verify_small_run_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["--out", out, "--seed", "7", "verify", "--trials", "5"]), EXIT_OK);
    let v = read(&tmp.path().join("verify.json"));
    assert_eq!(v["seed"], 7);
    assert!(v["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn unknown_subcommand_is_a_validation_error() {
    assert_eq!(run(&["frobnicate"]), EXIT_VALIDATION);
}
