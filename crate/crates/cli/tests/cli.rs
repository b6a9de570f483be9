use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lowmach(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowmach"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("stderr is JSON")
}

const SMALL_SIM: &str = r#"
[sim]
n = 16
[sim.params]
d = 2
gamma = 2.0
eps = 0.1
rho_bar = 1.0
t_final = 0.05
"#;

#[test]
fn version_lists_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let o = lowmach(&["--version"], dir.path());
    assert_eq!(code(&o), 0);
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.contains("snapshot format 1"));
    assert!(s.contains("lowmach.young_measure/1"));
}

#[test]
fn wavecone_default_pair() {
    let dir = tempfile::tempdir().unwrap();
    let o = lowmach(&["wavecone"], dir.path());
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    assert_eq!(v["determinant"].as_f64(), Some(-1.0));
    assert_eq!(v["member"].as_bool(), Some(false));
    assert!(dir.path().join("wavecone.json").exists());
}

#[test]
fn wavecone_equal_pressures_is_member() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("w.toml"), "u1 = [1.0, 0.0]\np1 = 0.5\nu2 = [0.0, 1.0]\np2 = 0.5\n").unwrap();
    let o = lowmach(&["wavecone", "-c", "w.toml"], dir.path());
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    assert_eq!(v["determinant"].as_f64(), Some(0.0));
    assert_eq!(v["member"].as_bool(), Some(true));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "u1 = \"x\"\np1 = 1.0\nu2 = [0.0, 0.0]\np2 = 0.0\n").unwrap();
    let o = lowmach(&["wavecone", "-c", "bad.toml"], dir.path());
    assert_eq!(code(&o), 2);
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "validation");
    assert_eq!(e["error"]["field"], "u1");

    fs::write(dir.path().join("n.toml"), SMALL_SIM.replace("n = 16", "n = 4")).unwrap();
    let o = lowmach(&["simulate", "-c", "n.toml"], dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(stderr_json(&o)["error"]["field"], "n");

    fs::write(dir.path().join("u.json"), r#"{"bogus": 1}"#).unwrap();
    let o = lowmach(&["ladder", "-c", "u.json"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_subcommand_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lowmach(&[], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn numerical_abort_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("write_snapshots = false\n{SMALL_SIM}[sim.init]\nname = \"rest\"\nvelocity = [1e160, 0.0]\n");
    fs::write(dir.path().join("f.toml"), cfg).unwrap();
    let o = lowmach(&["simulate", "-c", "f.toml"], dir.path());
    assert_eq!(code(&o), 3);
    assert_eq!(stderr_json(&o)["error"]["kind"], "numerical");
}

#[test]
fn jensen_inline_diatomic() {
    let dir = tempfile::tempdir().unwrap();
    let violated = r#"{"cells": [[{"weight": 0.5, "point": [1.0, 0.0, 1.0]}, {"weight": 0.5, "point": [0.0, 0.0, 0.0]}]], "assert_no_violation": true}"#;
    fs::write(dir.path().join("v.json"), violated).unwrap();
    let o = lowmach(&["jensen", "-c", "v.json"], dir.path());
    assert_eq!(code(&o), 4);
    assert_eq!(stdout_json(&o)["violated"], 1);
    assert_eq!(stderr_json(&o)["error"]["kind"], "check_failed");

    let fine = violated.replace("[0.0, 0.0, 0.0]", "[0.0, 0.0, 1.0]");
    fs::write(dir.path().join("ok.json"), fine).unwrap();
    let o = lowmach(&["jensen", "-c", "ok.json"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["violated"], 0);
}

#[test]
fn dry_run_validates_without_output() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["simulate", "ladder", "wavecone", "envelope", "relative-energy", "residual"] {
        let out = dir.path().join(cmd);
        let o = lowmach(&[cmd, "--dry-run", "-o", out.to_str().unwrap()], dir.path());
        assert_eq!(code(&o), 0, "{cmd}");
        let v = stdout_json(&o);
        assert_eq!(v["dry_run"], true);
        assert!(v["plan"].as_array().is_some_and(|p| !p.is_empty()));
        assert!(!out.exists(), "{cmd} wrote output on a dry run");
    }
}

#[test]
fn simulate_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), SMALL_SIM).unwrap();
    let a = lowmach(&["simulate", "-c", "s.toml", "-o", "a"], dir.path());
    let b = lowmach(&["simulate", "-c", "s.toml", "-o", "b", "--threads", "1"], dir.path());
    assert_eq!(code(&a), 0);
    assert_eq!(code(&b), 0);
    let ra = fs::read(dir.path().join("a/simulate.json")).unwrap();
    let rb = fs::read(dir.path().join("b/simulate.json")).unwrap();
    assert_eq!(ra, rb);
    let v: Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(v["admissibility"]["admissible"], true);
    let first = v["snapshots"][0].as_str().unwrap();
    let (hdr, state) = lowmach::snapshot::read_snapshot(&dir.path().join("a").join(first)).unwrap();
    assert_eq!(hdr.n, 16);
    assert_eq!(state.time, 0.0);
    assert!(dir.path().join("a/energy.json").exists());
}

#[test]
fn envelope_quadratic_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let o = lowmach(&["envelope", "--seed", "3"], dir.path());
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    let fz = v["f_z"].as_f64().unwrap();
    for method in ["laminate", "planewave"] {
        let mut last = fz;
        for est in v[method].as_array().unwrap() {
            let val = est["value"].as_f64().unwrap();
            assert!(val <= last + 1e-14, "{method} not monotone");
            assert!(est["recheck_mismatch"].as_f64().unwrap() <= 1e-6);
            last = val;
        }
    }
}

#[test]
fn residual_and_relative_energy_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), SMALL_SIM).unwrap();
    let o = lowmach(&["residual", "-c", "s.toml", "-o", "r"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout_json(&o)["max"].as_f64().unwrap().is_finite());

    let strict = format!("tolerance = 0.0\n{SMALL_SIM}");
    fs::write(dir.path().join("t.toml"), strict).unwrap();
    let o = lowmach(&["residual", "-c", "t.toml", "-o", "r"], dir.path());
    assert_eq!(code(&o), 4);

    let o = lowmach(&["relative-energy", "-c", "s.toml", "-o", "e"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["holds"], true);

    let shear = format!("{SMALL_SIM}[sim.init]\nname = \"shear\"\namplitude = 0.1\n");
    fs::write(dir.path().join("sh.toml"), shear).unwrap();
    let o = lowmach(&["relative-energy", "-c", "sh.toml"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn small_ladder_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[ladder]
eps_list = [0.1, 0.03, 0.01]
time_samples = 4
[ladder.template]
n = 16
flux = "rusanov_lowmach"
[ladder.template.params]
d = 2
gamma = 2.0
eps = 0.1
rho_bar = 1.0
t_final = 0.05

[analysis]
coarsen = 4
coarsen_t = 2
jensen = true
windows = { kmax = 2 }
[analysis.jensen_budgets]
depth = 1
diatomic_tol = 1e-8
certify_tol = 1e-10
search = { trials = 1, iterations = 50, seed = 0 }
"#;
    fs::write(dir.path().join("l.toml"), cfg).unwrap();
    let a = lowmach(&["ladder", "-c", "l.toml", "-o", "a"], dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = lowmach(&["ladder", "-c", "l.toml", "-o", "b"], dir.path());
    assert_eq!(code(&b), 0);
    let ra = fs::read(dir.path().join("a/report.json")).unwrap();
    assert_eq!(ra, fs::read(dir.path().join("b/report.json")).unwrap());
    let csv = fs::read_to_string(dir.path().join("a/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let v: Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(v["report"]["jensen"]["violated"], 0);
    assert_eq!(v["report"]["rungs"].as_array().unwrap().len(), 3);
}
