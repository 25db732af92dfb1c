use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smsctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smsctl")).args(args).output().unwrap()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_then_verify_case1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("case1");
    let config = bundled("case1.toml");
    let run = smsctl(&["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "{}", stdout(&run));
    assert!(stdout(&run).contains("[PASS] final_error"));
    for f in ["plan.csv", "tracking.csv", "constraints.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let check = smsctl(&["verify", out.to_str().unwrap()]);
    assert_eq!(check.status.code(), Some(0), "{}", stdout(&check));
}

#[test]
fn plan_stage_writes_no_tracking() {
    let dir = tempfile::tempdir().unwrap();
    let config = bundled("case2.toml");
    let run = smsctl(&["plan", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "{}", stdout(&run));
    assert!(dir.path().join("plan.csv").exists());
    assert!(!dir.path().join("tracking.csv").exists());
}

#[test]
fn tiny_velocity_limit_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(bundled("case1.toml"))
        .unwrap()
        .replace("qd_max_deg_s = [22.92, 22.92, 22.92]", "qd_max_deg_s = [0.01, 0.01, 0.01]");
    let config = dir.path().join("slow.toml");
    fs::write(&config, text).unwrap();
    let out = dir.path().join("out");
    let run = smsctl(&["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(1), "{}", stdout(&run));
    assert!(stdout(&run).contains("Infeasible"));
    assert!(fs::read_to_string(out.join("constraints.json")).unwrap().contains("joint_velocity"));
}

#[test]
fn invalid_config_exits_two_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(bundled("case1.toml"))
        .unwrap()
        .replace("tau_max = [3.5, 1.5, 1.5]", "tau_max = [3.5, -1.5, 1.5]");
    let config = dir.path().join("bad.toml");
    fs::write(&config, text).unwrap();
    let run = smsctl(&["run", config.to_str().unwrap(), "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.contains("controller.tau_max[1]"), "{err}");
}

#[test]
fn seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let config = bundled("case1.toml");
    let run = smsctl(&[
        "plan",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "42",
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", stdout(&run));
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 42"), "{manifest}");
}
