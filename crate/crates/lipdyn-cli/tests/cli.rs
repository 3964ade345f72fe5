use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn lipdyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipdyn")).args(args).output().expect("binary runs")
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    lipdyn(&args)
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn linear_saddle_manifold_is_flat() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_config(&configs().join("manifold_linear.json"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let g = json(&tmp.path().join("graph_unstable.json"));
    let values = g["values"].as_array().unwrap();
    assert_eq!(values.len(), 201);
    assert!(values.iter().all(|v| v.as_f64() == Some(0.0)));
    assert_eq!(json(&tmp.path().join("summary.json"))["status"], "pass");
}

#[test]
fn dat_file_matches_graph_json_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_config(&configs().join("manifold_saddle.json"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for dir in ["unstable", "stable"] {
        let g = json(&tmp.path().join(format!("graph_{dir}.json")));
        let values: Vec<f64> = g["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let radius = g["grid"]["radius"].as_f64().unwrap();
        let dat = fs::read_to_string(tmp.path().join(format!("manifold_{dir}.dat"))).unwrap();
        let rows: Vec<Vec<f64>> = dat.lines().filter(|l| !l.starts_with('#')).map(|l| l.split(' ').map(|t| t.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), values.len());
        assert_eq!(rows[0][0], -radius);
        assert_eq!(rows[rows.len() - 1][0], radius);
        for (r, v) in rows.iter().zip(&values) {
            assert_eq!(r[1].to_bits(), v.to_bits());
        }
    }
}

#[test]
fn chafee_lambda_two_is_equivalent_at_small_eta() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_config(&configs().join("chafee_lambda2.json"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let res = json(&tmp.path().join("chafee.json"));
    assert_eq!(res["report"]["max_equivalent_eta"].as_f64(), Some(0.05));
    let counts = fs::read_to_string(tmp.path().join("counts.csv")).unwrap();
    let found: Vec<&str> = counts.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(found, ["1", "3", "5", "7"]);
    for label in ["0", "phi1p", "phi1m"] {
        assert!(tmp.path().join(format!("profile_{label}.dat")).exists(), "{label}");
    }
}

#[test]
fn gap_violation_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run_config(&configs().join("split_gap_violated.json"), &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("ConfigInvalid") && err.contains("GapViolated") && err.contains("split.b"), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_field_reports_path_and_position() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        "{\n  \"pipeline\": \"certify\",\n  \"model\": { \"kind\": \"linear\", \"matrix\": [[2.0, 0.0], [0.0, 0.5]] },\n  \"params\": { \"certify\": { \"deltaa\": 0.1 } },\n  \"seeds\": { \"main\": 0 }\n}\n",
    );
    let o = run_config(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("params.certify") && err.contains("line 4"), "{err}");
}

#[test]
fn missing_seed_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "noseed.json", r#"{ "pipeline": "nemytskii" }"#);
    let o = run_config(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seeds"), "{}", stderr(&o));
}

#[test]
fn empty_result_sets_pass_with_zero_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfgs = [
        ("ms.json", r#"{ "pipeline": "morse-smale", "model": { "kind": "replicator" }, "params": { "equilibria": [] }, "seeds": { "main": 3 } }"#),
        ("nm.json", r#"{ "pipeline": "nemytskii", "params": { "radii": [] }, "seeds": { "main": 3 } }"#),
    ];
    for (name, body) in cfgs {
        let out = tmp.path().join(name.replace(".json", ""));
        let o = run_config(&write_config(tmp.path(), name, body), &out, &[]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
        let s = json(&out.join("summary.json"));
        assert_eq!(s["checks_total"], 0);
        assert_eq!(s["status"], "pass");
    }
}

#[test]
fn failing_checks_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_config(&configs().join("morse_smale_replicator.json"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let s = json(&tmp.path().join("summary.json"));
    assert_eq!(s["status"], "fail");
    let failed: Vec<&str> = s["failed_checks"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(failed.contains(&"morse_smale: no cycles"), "{failed:?}");
    let g = json(&tmp.path().join("graph.json"));
    assert_eq!(g["dg_flag"], false);
}

#[test]
fn stability_writes_stage_rows_per_eta() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_config(&configs().join("stability_bistable.json"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(tmp.path().join("stages.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    for eta in ["0.01", "0.05"] {
        let stages: Vec<&str> = rows.iter().filter(|r| &r[0] == eta).map(|r| &r[1]).collect();
        assert!(stages.contains(&"equivalence"), "{eta}: {stages:?}");
        assert!(rows.iter().filter(|r| &r[0] == eta).all(|r| &r[2] == "true"));
    }
    assert!(tmp.path().join("graph_eta0.dot").exists() && tmp.path().join("graph_eta1.dot").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["continue_saddle.json", "transversal_saddle.json"] {
        let (a, b) = (tmp.path().join(format!("a_{name}")), tmp.path().join(format!("b_{name}")));
        assert_eq!(run_config(&configs().join(name), &a, &[]).status.code(), Some(0));
        assert_eq!(run_config(&configs().join(name), &b, &[]).status.code(), Some(0));
        let files: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert!(!files.is_empty());
        for f in files {
            assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{name}: {f:?}");
        }
    }
}

#[test]
fn manifest_lists_every_file_with_its_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("split_saddle.json");
    assert_eq!(run_config(&cfg, tmp.path(), &[]).status.code(), Some(0));
    let m = json(&tmp.path().join("manifest.json"));
    assert_eq!(m["config_sha256"].as_str().unwrap(), hex::encode(Sha256::digest(fs::read(&cfg).unwrap())));
    let listed: Vec<&Value> = m["files"].as_array().unwrap().iter().collect();
    let mut on_disk: Vec<String> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).filter(|n| n != "manifest.json").collect();
    on_disk.sort();
    let names: Vec<&str> = listed.iter().map(|e| e["path"].as_str().unwrap()).collect();
    assert_eq!(names, on_disk);
    for e in listed {
        let bytes = fs::read(tmp.path().join(e["path"].as_str().unwrap())).unwrap();
        assert_eq!(e["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
        assert_eq!(e["bytes"].as_u64().unwrap() as usize, bytes.len());
    }
}

#[test]
fn check_only_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run_config(&configs().join("chafee_lambda2.json"), &out, &["--check-only"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("config ok"));
    assert!(!out.exists());
}

#[test]
fn seed_flag_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_config(&configs().join("certify_saddle.json"), tmp.path(), &["--seed", "99"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(&tmp.path().join("summary.json"))["seed"], 99);
}

#[test]
fn every_example_config_validates() {
    for entry in fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        let expect = if p.file_name().unwrap() == "split_gap_violated.json" { 1 } else { 0 };
        let o = lipdyn(&["run", p.to_str().unwrap(), "--check-only"]);
        assert_eq!(o.status.code(), Some(expect), "{}: {}", p.display(), stderr(&o));
    }
}
