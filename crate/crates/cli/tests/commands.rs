use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cib(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cib"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &str = r#"{"model": {"d": 8, "d_t": 4, "d_att": 4, "d_h": 4},
 "train": {"max_epochs": 12, "warmup_epochs": 4, "refresh_every": 4, "folds": 3, "patience": 5}}"#;

fn small_cohort(dir: &Path) {
    ok(&cib(
        &["--seed", "2", "generate", "--out", "coh", "--subjects", "24", "--rois", "10", "--planted", "3", "--timepoints", "40"],
        dir,
    ));
    fs::write(dir.join("small.json"), SMALL).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_writes_one_csv_per_subject() {
    let t = tempfile::tempdir().unwrap();
    ok(&cib(&["--seed", "7", "generate", "--out", "c", "--subjects", "120", "--rois", "90", "--planted", "10"], t.path()));
    assert_eq!(fs::read_dir(t.path().join("c/timeseries")).unwrap().count(), 120);
    let m = read_json(&t.path().join("c/manifest.json"));
    assert_eq!(m["subjects"].as_array().unwrap().len(), 120);
    assert_eq!(m["schema_version"], 1);
    let planted = read_json(&t.path().join("c/planted.json"));
    assert_eq!(planted["planted"].as_array().unwrap().len(), 10);
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let t = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&cib(&["--seed", "5", "generate", "--out", out, "--subjects", "10", "--rois", "6", "--planted", "2"], t.path()));
    }
    assert_eq!(tree(&t.path().join("a")), tree(&t.path().join("b")));
}

#[test]
fn generate_rejects_existing_dir_and_bad_spec() {
    let t = tempfile::tempdir().unwrap();
    let args = ["generate", "--out", "c", "--subjects", "10", "--rois", "6", "--planted", "2"];
    ok(&cib(&args, t.path()));
    assert_eq!(cib(&args, t.path()).status.code(), Some(2));
    let mut forced = vec!["--force"];
    forced.extend(args);
    ok(&cib(&forced, t.path()));
    let bad = cib(&["generate", "--out", "d", "--planted", "100", "--rois", "90"], t.path());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn connectome_matrices_are_symmetric_with_zero_diagonal() {
    let t = tempfile::tempdir().unwrap();
    ok(&cib(&["generate", "--out", "c", "--subjects", "4", "--rois", "5", "--planted", "1"], t.path()));
    ok(&cib(&["connectome", "--manifest", "c/manifest.json", "--out", "fc"], t.path()));
    let files: Vec<_> = fs::read_dir(t.path().join("fc")).unwrap().collect();
    assert_eq!(files.len(), 4);
    for f in files {
        let text = fs::read_to_string(f.unwrap().path()).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect();
        for i in 0..rows.len() {
            assert_eq!(rows[i][i], 0.0);
            for j in 0..rows.len() {
                assert_eq!(rows[i][j], rows[j][i]);
            }
        }
    }
}

#[test]
fn empty_manifest_warns_and_succeeds() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("m.json"), r#"{"schema_version": 1, "subjects": []}"#).unwrap();
    let out = cib(&["connectome", "--manifest", "m.json", "--out", "fc"], t.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(fs::read_dir(t.path().join("fc")).unwrap().count(), 0);
}

#[test]
fn missing_manifest_field_exits_2_naming_it() {
    let t = tempfile::tempdir().unwrap();
    small_cohort(t.path());
    let path = t.path().join("coh/manifest.json");
    let mut m = read_json(&path);
    m["subjects"][2].as_object_mut().unwrap().remove("handedness");
    let id = m["subjects"][2]["subject_id"].as_str().unwrap().to_string();
    fs::write(t.path().join("coh/broken.json"), m.to_string()).unwrap();
    let out = cib(&["train", "--manifest", "coh/broken.json", "--out", "r"], t.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&id) && err.contains("handedness"), "{err}");
}

#[test]
fn train_bundle_is_complete_and_reproducible() {
    let t = tempfile::tempdir().unwrap();
    small_cohort(t.path());
    let train = |out: &str| {
        ok(&cib(
            &["--config", "small.json", "train", "--manifest", "coh/manifest.json", "--out", out, "--preset", "abide-like"],
            t.path(),
        ))
    };
    train("r1");
    train("r2");
    let r1 = t.path().join("r1");
    for f in ["metrics.json", "history.csv", "biomarkers.csv", "attention.json", "embeddings.csv", "config.json"] {
        assert!(r1.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_dir(r1.join("models")).unwrap().count(), 3);
    assert_eq!(fs::read(r1.join("metrics.json")).unwrap(), fs::read(t.path().join("r2/metrics.json")).unwrap());

    let config = read_json(&r1.join("config.json"));
    assert_eq!(config["train"]["beta"], 0.8);
    assert_eq!(config["train"]["beta_h"], 0.5);
    assert_eq!(config["schema_version"], 1);

    // the echo alone reproduces the run
    ok(&cib(&["--config", "r1/config.json", "train", "--out", "r3"], t.path()));
    assert_eq!(fs::read(r1.join("metrics.json")).unwrap(), fs::read(t.path().join("r3/metrics.json")).unwrap());

    let attention = read_json(&r1.join("attention.json"));
    for fold in attention["folds"].as_array().unwrap() {
        let alpha: f64 = fold["report"]["alpha"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((alpha - 1.0).abs() < 1e-12);
    }
}

#[test]
fn explain_and_evaluate_a_saved_fold() {
    let t = tempfile::tempdir().unwrap();
    small_cohort(t.path());
    ok(&cib(&["--config", "small.json", "train", "--manifest", "coh/manifest.json", "--out", "r"], t.path()));
    let out = cib(&["evaluate", "--model", "r/models/fold_00.json", "--manifest", "coh/manifest.json"], t.path());
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let metrics = read_json(&t.path().join("r/metrics.json"));
    assert_eq!(report["auc"], metrics["folds"][0]["auc"]);

    let out = cib(
        &["explain", "--model", "r/models/fold_00.json", "--manifest", "coh/manifest.json", "--out", "ex", "--top", "4"],
        t.path(),
    );
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("top 4 ROIs"));
    let csv = fs::read_to_string(t.path().join("ex/biomarkers.csv")).unwrap();
    let total: f64 = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    for rel in ["site", "sex", "age", "hand"] {
        let adj = fs::read_to_string(t.path().join(format!("ex/adjacency_{rel}.csv"))).unwrap();
        assert_eq!(adj.lines().count(), 25, "{rel}");
    }
    let attention = read_json(&t.path().join("ex/attention.json"));
    let alpha: f64 = attention["folds"][0]["report"]["alpha"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((alpha - 1.0).abs() < 1e-12);
}

#[test]
fn explain_without_model_is_an_io_error() {
    let t = tempfile::tempdir().unwrap();
    small_cohort(t.path());
    let out = cib(&["explain", "--model", "absent.json", "--manifest", "coh/manifest.json", "--out", "ex"], t.path());
    assert_eq!(out.status.code(), Some(4));
}
