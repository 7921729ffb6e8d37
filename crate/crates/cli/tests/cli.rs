use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use danas::eval::Ranker;
use danas::predictor::PredictorCheckpoint;
use danas::search_space::{count_costs, ArchConfig};
use danas::task_db::{load_db, TaskRole};
use serde_json::Value;

fn danas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_danas")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = danas(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo").join(name)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Average ranks by counting, then Pearson on ranks.
fn oracle_spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let below = x.iter().filter(|&&u| u < v).count() as f64;
                let equal = x.iter().filter(|&&u| u == v).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = danas(&["eval", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(danas(&["train-everything"]).status.code(), Some(2));
}

#[test]
fn invalid_config_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = danas(&["--mini", "--out", s(dir.path()), "--set", "kd.temprature=3", "make-synth-db"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kd.temprature") && err.contains("kd.temperature") && err.contains("meta_batch"), "{err}");

    let file = dir.path().join("bad.toml");
    std::fs::write(&file, "pool_size = 3\n[kd]\nepochs = 2\nwarmup = 1\n").unwrap();
    let out = danas(&["--mini", "--config", s(&file), "--out", s(dir.path()), "make-synth-db"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kd.warmup"));
}

#[test]
fn eval_on_demo_fixture_matches_independent_src() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, db) = (fixture("predictor.dnp"), fixture("taskdb.jsonl"));
    let out = ok(&["--mini", "--set", "n_eval=12", "--out", s(dir.path()), "eval", "--predictor", s(&pred), "--db", s(&db)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("guided") && stdout.contains("mean"), "{stdout}");

    let result = read_json(&dir.path().join("result.json"));
    let ck = PredictorCheckpoint::load(&pred).unwrap();
    let db = load_db(&db).unwrap();
    let records = db.by_role(TaskRole::MetaTest);
    let tasks = db.prepare(&records, &ck.probe()).unwrap();
    let rows = result["tasks"].as_array().unwrap();
    assert_eq!(rows.len(), records.len());
    for ((row, task), rec) in rows.iter().zip(&tasks).zip(&records) {
        let scores = ck.state.rank_scores(task, 12).unwrap();
        let truth: Vec<f64> = rec.pairs.iter().map(|p| p.accuracy.0).collect();
        let expected = oracle_spearman(&scores, &truth);
        assert!((row["src_guided"].as_f64().unwrap() - expected).abs() < 1e-12);
        assert_eq!(row["n_eval"], 12);
    }
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["space"]["digest"], ck.spec.digest());
    assert!(manifest["inputs"]["predictor"]["hash"].is_string());
    assert!(manifest["outputs"]["result.json"].is_string());
    assert!(!dir.path().join(danas_cli::LOCK_FILE).exists());
}

#[test]
fn demo_fixture_regenerates_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (db_dir, pred_dir) = (dir.path().join("db"), dir.path().join("pred"));
    ok(&["--mini", "--out", s(&db_dir), "make-synth-db"]);
    let db = db_dir.join("taskdb.jsonl");
    ok(&["--mini", "--out", s(&pred_dir), "meta-train", "--db", s(&db)]);
    assert_eq!(std::fs::read(&db).unwrap(), std::fs::read(fixture("taskdb.jsonl")).unwrap());
    assert_eq!(std::fs::read(pred_dir.join("predictor.dnp")).unwrap(), std::fs::read(fixture("predictor.dnp")).unwrap());
}

#[test]
fn reruns_are_byte_identical_and_manifest_config_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let db = fixture("taskdb.jsonl");
    let set = ["--set", "meta_iterations=40", "--set", "seed=5"];
    for out in [&a, &b] {
        let mut args = vec!["--mini", "--out", s(out)];
        args.extend(set);
        args.extend(["meta-train", "--db", s(&db)]);
        ok(&args);
    }
    // The resolved config alone, over the default preset, gives the same run.
    let cfg = a.join("config.toml");
    ok(&["--config", s(&cfg), "--out", s(&c), "meta-train", "--db", s(&db)]);
    for name in ["result.json", "predictor.dnp"] {
        let first = std::fs::read(a.join(name)).unwrap();
        assert_eq!(first, std::fs::read(b.join(name)).unwrap(), "{name}");
        assert_eq!(first, std::fs::read(c.join(name)).unwrap(), "{name}");
    }
    let (ma, mb) = (read_json(&a.join("manifest.json")), read_json(&b.join("manifest.json")));
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["config"], read_json(&c.join("manifest.json"))["config"]);
    assert!(read_json(&a.join("timing.json"))["meta_train_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(danas_cli::LOCK_FILE), "1\n").unwrap();
    let out = danas(&["--mini", "--out", s(dir.path()), "make-synth-db"]);
    assert_eq!(out.status.code(), Some(7));
    assert!(!dir.path().join("taskdb.jsonl").exists());
}

#[test]
fn missing_checkpoint_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.dnp");
    let out = danas(&["--mini", "--out", s(dir.path()), "eval", "--predictor", s(&missing), "--db", s(&fixture("taskdb.jsonl"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.dnp"));
}

#[test]
fn predictor_search_and_predict_on_synthetic_teachers() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, db) = (fixture("predictor.dnp"), fixture("taskdb.jsonl"));
    let common = ["--mini", "--set", "budget_macs=200000"];
    let mut args = common.to_vec();
    args.extend(["--out", s(dir.path()), "search", "--predictor", s(&pred), "--db", s(&db), "--split", "5"]);
    ok(&args);
    let res = read_json(&dir.path().join("result.json"));
    let ck = PredictorCheckpoint::load(&pred).unwrap();
    let top: ArchConfig = serde_json::from_value(res["top"]["config"].clone()).unwrap();
    assert!(count_costs(&ck.spec, &top, ck.spec.input_shape).macs < 200_000);
    assert_eq!(res["sampled"], 100);
    assert!(read_json(&dir.path().join("timing.json"))["seconds_per_architecture"].as_f64().unwrap() > 0.0);

    let out = dir.path().join("p");
    ok(&["--mini", "--out", s(&out), "predict", "--predictor", s(&pred), "--db", s(&db), "--split", "5", "--arch", &top.to_string()]);
    let scores = read_json(&out.join("result.json"));
    let ranked = res["ranked"].as_array().unwrap();
    assert_eq!(scores["scores"][0]["score"], ranked[0]["score"]);

    // Zero-cost proxies need images, which synthetic teachers do not have.
    let zc = dir.path().join("zc");
    let out = danas(&["--mini", "--out", s(&zc), "search", "--method", "grad-norm", "--db", s(&db), "--split", "5"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn tiny_image_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--mini",
        "--set", "splits=2",
        "--set", "synthetic.num_classes=4",
        "--set", "synthetic.per_class=10",
        "--set", "teacher_epochs=1",
        "--set", "pool_size=4",
        "--set", "pairs_per_task=2",
        "--set", "kd.epochs=1",
        "--set", "kd.batch_size=8",
        "--set", "n_candidates=10",
        "--set", "budget_macs=0",
    ];
    let run = |out: &Path, rest: &[&str]| {
        let mut args = small.to_vec();
        args.extend(["--out", s(out)]);
        args.extend(rest);
        ok(&args)
    };
    let built = dir.path().join("db");
    run(&built, &["build-db"]);
    let db_path = built.join("taskdb.jsonl");
    let db = load_db(&db_path).unwrap();
    assert_eq!(db.records.len(), 2);
    assert!(db.records.iter().all(|r| r.pairs.len() == 2));

    let distilled = dir.path().join("distill");
    run(&distilled, &["distill", "--db", s(&db_path), "--split", "0", "--arch", "depths=1,1 ratios=1/1"]);
    let res = read_json(&distilled.join("result.json"));
    assert_eq!(res["history"].as_array().unwrap().len(), 2);
    assert!(distilled.join("student.dnt").exists());

    let teacher = dir.path().join("teacher.dnt");
    let rec = &db.records[0];
    std::fs::copy(db.dir.join(match &rec.teacher {
        danas::task_db::TeacherRef::Checkpoint { file, .. } => file.clone(),
        other => panic!("expected a checkpoint, got {other:?}"),
    }), &teacher)
    .unwrap();
    for method in ["grad-norm", "activation-overlap"] {
        let out = dir.path().join(method);
        run(&out, &["search", "--method", method, "--teacher", s(&teacher), "--split", "0"]);
        let res = read_json(&out.join("result.json"));
        assert_eq!(res["method"], method);
        assert!(!res["ranked"].as_array().unwrap().is_empty());
    }
}
