use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TORUS: &str = "\
[problem]
p = 1
q = -0.5
domain = torus
tau1 = 2*pi
tau2 = 2*pi
upper = (pi, pi)
lower = (1, 1)

[grid]
n1 = 32
n2 = 32
";

const SYMMETRIC_DISK: &str = "\
[problem]
p = 1
q = -0.5
domain = disk
radius = 6
upper = (0, 0)
lower = (0, 0)

[grid]
n1 = 97

[solver]
epsilons = 0.02; 0.01
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csvortex"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &TempDir, text: &str) -> String {
    let path = dir.path().join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("vortex-free torus: PASS"));
}

#[test]
fn small_torus_solve_writes_deterministic_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, TORUS);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["solve-torus", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ra = report(&a);
    assert_eq!(ra["converged"], Value::Bool(true));
    assert_eq!(ra["identities"].as_array().unwrap().len(), 4);
    assert_eq!(ra["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(ra, report(&b));

    let csv = fs::read_to_string(a.join("fields_u.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,y,value"));
    assert_eq!(lines.count(), 32 * 32);
    assert_eq!(csv, fs::read_to_string(b.join("fields_u.csv")).unwrap());

    let o = run(&["diagnose", "--config", &cfg, "--out", a.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(a.join("diagnostics.json").exists());
}

#[test]
fn overrides_change_the_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, TORUS);
    let out = dir.path().join("o");
    let o = run(&["solve-torus", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(0));
    let h1 = report(&out)["config_hash"].clone();
    let o = run(&[
        "solve-torus", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet",
        "--override", "solver.tol_outer=1e-9",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(&out);
    assert_ne!(h1, r["config_hash"]);
    assert!(r["config"].as_array().unwrap().iter().any(|l| l == "solver.tol_outer = 1e-9"));
}

#[test]
fn q_zero_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &TORUS.replace("q = -0.5", "q = 0"));
    let o = run(&["solve-torus", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("line 3") && msg.contains("q must be nonzero"), "{msg}");
}

#[test]
fn positive_determinant_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &TORUS.replace("q = -0.5", "q = 0.5"));
    let o = run(&["solve-torus", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("out of scope"), "{}", stderr(&o));
}

#[test]
fn syntax_error_reports_its_line() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &TORUS.replace("n2 = 32", "n2 32"));
    let o = run(&["solve-torus", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 12: syntax error"), "{}", stderr(&o));
}

#[test]
fn torus_below_threshold_is_infeasible() {
    let dir = TempDir::new().unwrap();
    let text = TORUS
        .replace("tau1 = 2*pi", "tau1 = 1")
        .replace("tau2 = 2*pi", "tau2 = 1")
        .replace("upper = (pi, pi)", "upper = (0.5, 0.5)")
        .replace("lower = (1, 1)", "lower = (0.25, 0.25)");
    let cfg = write_config(&dir, &text);
    let o = run(&["solve-torus", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
}

#[test]
fn sweep_flips_at_the_threshold() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, TORUS);
    let out = dir.path().join("sweep");
    let o = run(&[
        "sweep-threshold", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet",
        "--override", "grid.n1=16", "--override", "grid.n2=16",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let feasible: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(feasible, ["false", "false", "false", "true", "true", "true"]);
}

#[test]
fn regime_b_full_plane_is_infeasible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &SYMMETRIC_DISK.replace("q = -0.5", "q = -2"));
    let o = run(&["solve-fullplane", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn symmetric_disk_satisfies_its_identities() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, SYMMETRIC_DISK);
    let out = dir.path().join("disk");
    let o = run(&[
        "solve-disk", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet",
        "--override", "output.diagnostics=max_principle;sandwich;charges",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(&out);
    assert!(r["charges"]["q_tilde"].as_f64().unwrap().abs() < 1e-8);
    assert!(out.join("profile_u.csv").exists());
}

#[test]
fn wrong_domain_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, TORUS);
    assert_eq!(run(&["solve-disk", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
}
