use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use damm_ds::eval::io::write_csv;
use damm_ds::eval::synthetic::{generate, Shape, SyntheticConfig};
use damm_ds::pipeline::learn;
use damm_ds::{LearnConfig, SamplerConfig};
use damm_ds_cli::model_file::{ModelFile, SCHEMA_VERSION};

fn damm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_damm"))
        .args(args)
        .env("DAMM_WORKERS", "2")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_shape(dir: &Path, name: &str, shape: Shape, seed: u64, samples: usize) -> PathBuf {
    let cfg = SyntheticConfig {
        samples,
        ..SyntheticConfig::default()
    };
    let demo = generate(shape, seed, &cfg).unwrap();
    let path = dir.join(name);
    write_csv(&demo, std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn learned_model(dir: &Path) -> (PathBuf, PathBuf) {
    let data = write_shape(dir, "s.csv", Shape::SCurve, 5, 60);
    let model = dir.join("model.json");
    let out = damm(&["learn", s(&data), "-o", s(&model), "--iters", "40"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (data, model)
}

#[test]
fn learn_writes_model_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = learned_model(dir.path());
    let file = ModelFile::read(&model).unwrap();
    assert_eq!(file.schema_version, SCHEMA_VERSION);
    assert_eq!(file.d, 2);
    assert_eq!(file.components.len(), file.k);
    assert!(file.provenance.wall_time_cluster_s.is_none());
    file.decode().unwrap();

    let data = dir.path().join("s.csv");
    let again = dir.path().join("again.json");
    let out = damm(&["learn", s(&data), "-o", s(&again), "--iters", "40"]);
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["K"].as_u64().unwrap() as usize, file.k);
    assert_eq!(line["N"], 180);
    assert!(line["edot"].as_f64().unwrap() < 1.0);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn missing_input_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    let out = damm(&["learn", s(&dir.path().join("nope.csv")), "-o", s(&model)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
    assert!(!model.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_shape(dir.path(), "l.csv", Shape::Line, 1, 30);
    let out = damm(&["benchmark", s(&data), "--method", "damm,kmeans"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gmm-pv"));
}

#[test]
fn bad_flags_exit_one_and_help_exits_zero() {
    assert_eq!(damm(&["learn"]).status.code(), Some(1));
    assert_eq!(damm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(damm(&["--help"]).status.code(), Some(0));
}

#[test]
fn benchmark_reports_every_method_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_shape(dir.path(), "l.csv", Shape::Line, 1, 40);
    let out = damm(&["benchmark", s(&data), "--method", "damm,gmm-p", "--seeds", "2", "--iters", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let end = text.find("\nmethod").unwrap();
    let reports: Vec<serde_json::Value> = serde_json::from_str(&text[..end]).unwrap();
    assert_eq!(reports.len(), 4);
    assert_eq!(reports[0]["method"], "damm");
    assert_eq!(reports[3]["method"], "gmm-p");
    assert_eq!(reports[3]["seed"], 1);
    for r in &reports {
        assert!(r["K_final"].as_u64().unwrap() >= 1);
        assert!(r["dtwd"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn rollout_at_attractor_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = learned_model(dir.path());
    let trace = dir.path().join("t.csv");
    let out = damm(&["rollout", "--model", s(&model), "--start", "0,0", "-o", s(&trace)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 2, "{text}");

    let out = damm(&["rollout", "--model", s(&model), "--data", s(&data), "-o", s(&trace)]);
    assert!(out.status.success());
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["trajectories"].as_array().unwrap().len(), 3);
    assert_eq!(line["converged"], true);
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().filter(|l| *l == "---").count(), 2);
}

#[test]
fn incremental_with_empty_batch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = learned_model(dir.path());
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "x1,x2,v1,v2\n").unwrap();
    let out_path = dir.path().join("inc.json");
    let out = damm(&[
        "incremental", "--model", s(&model), "--old", s(&data), "--new", s(&empty), "-o", s(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_path.exists());
}

#[test]
fn incremental_keeps_old_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = learned_model(dir.path());
    let new = write_shape(dir.path(), "new.csv", Shape::SCurve, 6, 60);
    let out_path = dir.path().join("inc.json");
    let out = damm(&[
        "incremental", "--model", s(&model), "--old", s(&data), "--new", s(&new), "-o", s(&out_path),
        "--iters", "30",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let before = ModelFile::read(&model).unwrap();
    let after = ModelFile::read(&out_path).unwrap();
    assert!(after.assignments.len() > before.assignments.len());
    assert_eq!(&after.assignments[..before.assignments.len()], &before.assignments[..]);
    assert_eq!(after.provenance.prior, before.provenance.prior);
    assert_eq!(after.provenance.iterations, before.provenance.iterations + 30);
}

#[test]
fn unknown_schema_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = learned_model(dir.path());
    let text = std::fs::read_to_string(&model).unwrap();
    let bumped = text.replacen(
        &format!("\"schema_version\": {SCHEMA_VERSION}"),
        &format!("\"schema_version\": {}", SCHEMA_VERSION + 1),
        1,
    );
    assert_ne!(text, bumped);
    let err = ModelFile::from_json(&bumped).unwrap().decode().unwrap_err();
    assert!(err.to_string().contains("schema_version"));
    std::fs::write(&model, bumped).unwrap();
    let out = damm(&["rollout", "--model", s(&model), "--start", "1,1", "-o", s(&dir.path().join("t.csv"))]);
    assert_eq!(out.status.code(), Some(1));

    let extra = text.replacen('{', "{\n  \"surprise\": 1,", 1);
    assert!(ModelFile::from_json(&extra).is_err());
}

#[test]
fn model_file_round_trips_exactly() {
    let demo = generate(Shape::MultiBehavior, 2, &SyntheticConfig { samples: 50, ..Default::default() }).unwrap();
    let sampler = SamplerConfig {
        iterations: 30,
        ..SamplerConfig::default()
    };
    let config = LearnConfig {
        sampler: sampler.clone(),
        ..LearnConfig::default()
    };
    let learned = learn(&demo, &config).unwrap();
    let file = ModelFile::from_learned(&learned, &sampler, true);
    let back = ModelFile::from_json(&file.to_json().unwrap()).unwrap();
    assert_eq!(back, file);
    let loaded = back.decode().unwrap();
    assert_eq!(loaded.state.assignments(), learned.state.assignments());
    for (a, b) in loaded.lpvds.a().iter().zip(learned.lpvds.a()) {
        assert_eq!(a, b);
    }
    assert_eq!(back.to_json().unwrap(), file.to_json().unwrap());
}
