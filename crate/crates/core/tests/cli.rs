mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lr_transformer::cli::run;
use lr_transformer::corpus::{synthetic_examples, write_split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const TINY: &str = "d_model = 8\nd_ff = 16\nn_enc_layers = 2\nn_dec_layers = 2\nn_heads = 2\nd_e = 8\nlrm_after_layer = 1\nrel_clip = 2\ndropout = 0.1\nbatch_size = 8\nmax_epochs = 2\n";

fn toy_corpus(root: &Path) -> PathBuf {
    let data = root.join("data");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = common::tiny_spec();
    for (split, n) in [("train", 24), ("valid", 8), ("test", 8)] {
        write_split(&data.join(split), &synthetic_examples(&spec, n, &mut rng)).unwrap();
    }
    fs::write(root.join("tiny.conf"), TINY).unwrap();
    data
}

fn lrt(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("lrt").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(root: &Path, out: &Path) -> (i32, String, String) {
    let data = root.join("data");
    let conf = root.join("tiny.conf");
    lrt(&["train", "--data", s(&data), "--config", s(&conf), "--out", s(out), "--seed", "3"])
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (code, out, err) = train(dir.path(), &a);
    assert_eq!(code, 0, "{err}");
    for f in ["checkpoint.bin", "checkpoint.json", "vocab.json", "metrics.jsonl"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["epochs"], 2);
    assert!(err.contains("epoch   1"));
    assert_eq!(train(dir.path(), &b).0, 0);
    let log_a = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(log_a.lines().count(), 2);
    assert_eq!(log_a, fs::read_to_string(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn bad_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_corpus(dir.path());
    fs::write(dir.path().join("bad.conf"), "d_model = 8\nlearning_rate = 0.1\n").unwrap();
    let (code, _, err) = lrt(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&dir.path().join("bad.conf")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn gold_scored_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_corpus(dir.path());
    let test = data.join("test");
    let (code, out, _) = lrt(&["eval", "--pred", s(&test), "--gold", s(&test)]);
    assert_eq!(code, 0);
    let m: Value = serde_json::from_str(&out).unwrap();
    assert_eq!((m["intent_accuracy"].as_f64(), m["slot_f1"].as_f64(), m["overall_accuracy"].as_f64()), (Some(100.0), Some(100.0), Some(100.0)));
    assert_eq!(m["errors"]["slot_errors"], 0);
}

#[test]
fn missing_model_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_corpus(dir.path());
    let missing = dir.path().join("nope");
    assert_eq!(lrt(&["eval", "--model", s(&missing), "--data", s(&data)]).0, 2);
    // An existing directory without a checkpoint is the same usage error.
    assert_eq!(lrt(&["eval", "--model", s(&data), "--data", s(&data)]).0, 2);
    assert_eq!(lrt(&["bench", "--model", s(&missing), "--data", s(&data)]).0, 2);
}

#[test]
fn model_path_and_prediction_path_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_corpus(dir.path());
    let model = dir.path().join("model");
    assert_eq!(train(dir.path(), &model).0, 0);
    let dump = dir.path().join("pred");
    let (code, from_model, err) = lrt(&["eval", "--model", s(&model), "--data", s(&data), "--dump-pred", s(&dump)]);
    assert_eq!(code, 0, "{err}");
    let (code, from_files, _) = lrt(&["eval", "--pred", s(&dump), "--gold", s(&data.join("test"))]);
    assert_eq!(code, 0);
    assert_eq!(from_model, from_files);

    let (code, analyzed, _) = lrt(&["analyze", "--pred", s(&dump), "--gold", s(&data.join("test"))]);
    assert_eq!(code, 0);
    let a: Value = serde_json::from_str(&analyzed).unwrap();
    let m: Value = serde_json::from_str(&from_model).unwrap();
    assert_eq!(a["uncoordinated"], m["errors"]["uncoordinated"]);
    let sum = ["bi_errors", "ib_errors", "other_unc"].iter().map(|k| a[k].as_u64().unwrap()).sum::<u64>();
    assert_eq!(Some(sum), a["uncoordinated"].as_u64());

    let (code, bench, err) = lrt(&["bench", "--model", s(&model), "--data", s(&data), "--warmup", "2", "--repeat", "2"]);
    assert_eq!(code, 0, "{err}");
    let b: Value = serde_json::from_str(&bench).unwrap();
    assert_eq!(b["utterances"], 8);
    assert_eq!(b["predictions_stable"], true);
    assert!(b["with_lrm"]["mean_ms"].as_f64().unwrap() > 0.0);
    assert!(b["ratio"].as_f64().unwrap().is_finite());
}

#[test]
fn gold_against_gold_analysis_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_corpus(dir.path());
    let gold = data.join("test").join("seq.out");
    let (code, out, _) = lrt(&["analyze", "--pred", s(&gold), "--gold", s(&gold)]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["slot_errors"], 0);
    assert_eq!(v["uncoordinated"], 0);
    assert_eq!(v["cases"], Value::Array(vec![]));
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_lrt");
    let out = Command::new(exe).args(["eval", "--model", "/definitely/missing", "--data", "/tmp"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    let out = Command::new(exe).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("seq.out"), "O B-a\n").unwrap();
    fs::create_dir(dir.path().join("short")).unwrap();
    fs::write(dir.path().join("short").join("seq.out"), "O\n").unwrap();
    let out = Command::new(exe)
        .args(["analyze", "--pred", s(&dir.path().join("short")), "--gold", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
