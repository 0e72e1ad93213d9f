use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shadowprice"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env_remove("SHADOWPRICE_OUT_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn manifest(dir: &Path, sub: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join(format!("{sub}.manifest.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn simulation_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["simulate-fbm", "--paths", "3", "--steps", "32", "--hurst", "0.3", "--seed", "11"];
    assert_eq!(code(&run(a.path(), &args)), 0);
    assert_eq!(code(&run(b.path(), &args)), 0);
    let read = |d: &Path| std::fs::read(d.join("simulate-fbm.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let (ma, mb) = (manifest(a.path(), "simulate-fbm"), manifest(b.path(), "simulate-fbm"));
    assert_eq!(ma["manifest_sha256"], mb["manifest_sha256"]);
    assert_eq!(ma["seed"], 11);
}

#[test]
fn outputs_carry_the_manifest_hash() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["optimize-tree", "--depth", "2"])), 0);
    let hash = manifest(dir.path(), "optimize-tree")["manifest_sha256"].as_str().unwrap().to_string();
    let out: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("optimize-tree.json")).unwrap()).unwrap();
    assert_eq!(out["manifest_sha256"], hash.as_str());
    assert!(out["result"]["value"].is_number());

    assert_eq!(code(&run(dir.path(), &["twc-stats", "--depth", "3", "--eps-points", "4"])), 0);
    let csv = std::fs::read_to_string(dir.path().join("twc-stats.csv")).unwrap();
    let hash = manifest(dir.path(), "twc-stats")["manifest_sha256"].as_str().unwrap().to_string();
    assert_eq!(csv.lines().next().unwrap(), format!("# manifest-sha256: {hash}"));
}

#[test]
fn the_hash_tracks_parameters() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &["simulate-fbm", "--seed", "1"]);
    let h1 = manifest(dir.path(), "simulate-fbm")["manifest_sha256"].clone();
    run(dir.path(), &["simulate-fbm", "--seed", "2"]);
    let h2 = manifest(dir.path(), "simulate-fbm")["manifest_sha256"].clone();
    assert_ne!(h1, h2);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["simulate-fbm", "--no-such-flag"])), 2);
    assert_eq!(code(&run(dir.path(), &["simulate-fbm", "--hurst", "1.5"])), 2);
    assert_eq!(code(&run(dir.path(), &["cps-build", "--depth", "2", "--mu-prime", "1.5"])), 2);
    assert_eq!(code(&run(dir.path(), &["bound-check", "--lambda", "0.01", "--delta", "0.05"])), 2);
    assert_eq!(code(&run(dir.path(), &["nonsense"])), 2);
}

#[test]
fn failed_checks_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // every path crosses far more often than the largest n in the curve, so no tail fit exists
    let o = run(dir.path(), &["tail-fit", "--delta", "0.1", "--paths", "200", "--steps", "256", "--n-max", "5"]);
    assert_eq!(code(&o), 1);
    assert_eq!(manifest(dir.path(), "tail-fit")["verified"], false);
}

#[test]
fn tree_commands_verify() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["shadow-verify", "--depth", "3", "--hurst", "0.7"][..],
        &["duality-gap", "--depth", "3"],
        &["cps-build", "--depth", "5"],
        &["detect-oia", "--depth", "5"],
    ] {
        let o = run(dir.path(), args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let cps: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cps-build.json")).unwrap()).unwrap();
    assert_eq!(cps["result"]["containment_violation"], 0.0);
}

#[test]
fn config_values_yield_to_flags_with_a_note() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# defaults\nseed = 5\nsteps = 16\n").unwrap();
    let o = run(dir.path(), &["simulate-fbm", "--config", cfg.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(code(&o), 0);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("--seed=7 overrides seed=5"), "{stderr}");
    let m = manifest(dir.path(), "simulate-fbm");
    assert_eq!(m["parameters"]["seed"], "7");
    assert_eq!(m["parameters"]["steps"], "16");
    assert_eq!(m["notes"].as_array().unwrap().len(), 1);

    std::fs::write(&cfg, "unknown = 1\n").unwrap();
    assert_eq!(code(&run(dir.path(), &["simulate-fbm", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("nested");
    let o = Command::new(env!("CARGO_BIN_EXE_shadowprice"))
        .args(["simulate-fbm", "--steps", "8"])
        .env("SHADOWPRICE_OUT_DIR", &target)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(target.join("simulate-fbm.csv").exists());
    assert!(target.join("simulate-fbm.manifest.json").exists());
}
