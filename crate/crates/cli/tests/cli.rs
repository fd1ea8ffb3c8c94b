use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: &str = "mesh.n = 10\noed.random_samples = 20\nuq.mc_samples = 500\n";

fn coed(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coed"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), config).unwrap();
    dir
}

fn run_ok(dir: &Path, args: &[&str]) {
    let out = coed(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn checksum(m: &Value, path: &str) -> String {
    m["phases"]
        .as_object()
        .unwrap()
        .values()
        .flat_map(|p| p["files"].as_array().unwrap())
        .find(|f| f["path"] == path)
        .unwrap_or_else(|| panic!("{path} not in manifest"))["sha256"]
        .as_str()
        .unwrap()
        .to_string()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let j = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(j).unwrap().parse().unwrap()).collect()
}

#[test]
fn all_phases_write_a_consistent_manifest() {
    let dir = setup(SMALL);
    run_ok(dir.path(), &["all", "--config", "run.cfg", "--out", "out", "--exact-mode"]);
    let out = dir.path().join("out");
    let m = manifest(&out);
    assert_eq!(m["exact_mode"], true);
    assert_eq!(m["config"]["mesh.n"], "10");
    assert_eq!(m["streams"]["noise"]["id"], 1);
    let phases = m["phases"].as_object().unwrap();
    assert_eq!(phases.len(), 5);
    let mut count = 0;
    for phase in phases.values() {
        assert!(phase["wall_seconds"].as_f64().unwrap() >= 0.0);
        for f in phase["files"].as_array().unwrap() {
            let bytes = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
            assert_eq!(bytes.len() as u64, f["bytes"].as_u64().unwrap());
            let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            assert_eq!(digest, f["sha256"].as_str().unwrap());
            count += 1;
        }
    }
    assert!(count >= 20);
    for field in ["m_true.csv", "data.csv", "m_map.csv", "posterior_variance.csv"] {
        assert!(out.join("invert").join(field).exists());
    }
    let oed = &phases["oed"]["stats"];
    let evaluations = oed["evaluations"]["coed"].as_u64().unwrap();
    assert!(evaluations <= oed["evaluation_budget"].as_u64().unwrap());
    assert_eq!(oed["greedy_pde_solves"], 0);
    assert!(phases["uq"]["stats"]["mc_mean_rel_error"].as_f64().unwrap() < 0.05);
}

#[test]
fn full_data_posterior_variance_never_exceeds_the_prior() {
    let dir = setup(SMALL);
    run_ok(dir.path(), &["invert", "--config", "run.cfg", "--out", "out"]);
    let path = dir.path().join("out/invert/posterior_variance.csv");
    let prior = column(&path, "prior");
    let post = column(&path, "posterior");
    assert_eq!(prior.len(), 121);
    assert!(post.iter().zip(&prior).all(|(q, p)| *q > 0.0 && q <= p));
}

#[test]
fn identical_runs_give_identical_checksums() {
    let dir = setup(SMALL);
    run_ok(dir.path(), &["oed", "--config", "run.cfg", "--out", "a", "--threads", "2"]);
    run_ok(dir.path(), &["oed", "--config", "run.cfg", "--out", "b", "--threads", "3"]);
    let (a, b) = (manifest(&dir.path().join("a")), manifest(&dir.path().join("b")));
    for file in ["oed/designs.csv", "oed/criteria.csv", "oed/random_designs.csv", "oed/greedy.csv"] {
        assert_eq!(checksum(&a, file), checksum(&b, file), "{file}");
    }
}

#[test]
fn seed_changes_data_but_not_discretization() {
    let dir = setup(SMALL);
    run_ok(dir.path(), &["invert", "--config", "run.cfg", "--out", "a"]);
    run_ok(dir.path(), &["invert", "--config", "run.cfg", "--out", "b", "--seed", "99"]);
    let (a, b) = (manifest(&dir.path().join("a")), manifest(&dir.path().join("b")));
    assert_eq!(b["seed"], 99);
    for file in ["invert/mesh.csv", "invert/operators.csv", "invert/m_true.csv"] {
        assert_eq!(checksum(&a, file), checksum(&b, file), "{file}");
    }
    assert_ne!(checksum(&a, "invert/data.csv"), checksum(&b, "invert/data.csv"));
}

#[test]
fn uq_reads_only_persisted_artifacts() {
    let dir = setup(&format!("{SMALL}control.target = reachable\n"));
    let args = ["--config", "run.cfg", "--out", "out"];
    for phase in ["invert", "oed", "uq"] {
        run_ok(dir.path(), &[&[phase][..], &args[..]].concat());
    }
    let out = dir.path().join("out");
    assert!(out.join("invert/reference_data.csv").exists());
    let m = manifest(&out);
    assert_eq!(m["phases"].as_object().unwrap().len(), 3);

    // Overwriting the coed design with the classical one changes the moments
    // the next uq run reports.
    let before = fs::read_to_string(out.join("uq/moments.csv")).unwrap();
    let designs = out.join("oed/designs.csv");
    let text = fs::read_to_string(&designs).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let coed = header.iter().position(|h| *h == "coed").unwrap();
    let classical = header.iter().position(|h| *h == "classical").unwrap();
    let lines: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let mut cells: Vec<&str> = l.split(',').collect();
            if i > 0 {
                cells[coed] = cells[classical];
            }
            cells.join(",")
        })
        .collect();
    fs::write(&designs, lines.join("\n") + "\n").unwrap();
    run_ok(dir.path(), &[&["uq"][..], &args[..]].concat());
    let after = fs::read_to_string(out.join("uq/moments.csv")).unwrap();
    assert_ne!(before, after);
}

#[test]
fn control_reports_the_improvement() {
    let dir = setup(SMALL);
    let args = ["--config", "run.cfg", "--out", "out"];
    for phase in ["invert", "oed"] {
        run_ok(dir.path(), &[&[phase][..], &args[..]].concat());
    }
    run_ok(dir.path(), &[&["control", "--design", "full"][..], &args[..]].concat());
    let m = manifest(&dir.path().join("out"));
    let improvement = m["phases"]["control"]["stats"]["improvement"].as_f64().unwrap();
    assert!(improvement > 0.5 && improvement < 1.0, "{improvement}");
    let z = column(&dir.path().join("out/control/control.csv"), "z");
    assert_eq!(z.len(), 20);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = setup("mesh.n = 10\nmesh.typo = 3\n");
    let out = coed(dir.path(), &["invert", "--config", "run.cfg", "--out", "out"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mesh.typo"));

    let out = coed(dir.path(), &["invert", "--config", "missing.cfg"]);
    assert_eq!(out.status.code(), Some(2));

    let good = setup(SMALL);
    let out = coed(good.path(), &["uq", "--config", "run.cfg", "--out", "fresh"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("[uq]") && msg.contains("coed invert"), "{msg}");

    let out = coed(good.path(), &["control", "--design", "best", "--config", "run.cfg", "--out", "fresh"]);
    assert_eq!(out.status.code(), Some(2));

    let big = setup("mesh.n = 60\n");
    let out = coed(big.path(), &["invert", "--config", "run.cfg", "--exact-mode"]);
    assert_eq!(out.status.code(), Some(2));
}
