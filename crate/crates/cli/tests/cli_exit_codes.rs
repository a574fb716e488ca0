//! Exit status contract of the binary: 0 success, 1 runtime failure,
//! 2 invalid input or configuration.

use std::path::{Path, PathBuf};
use std::process::Command;

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_eegphon")).args(args).output().expect("binary runs");
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: [&str; 7] = ["--tiny", "--epochs", "2", "--warmup", "1", "--batch", "16"];

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    synth: PathBuf,
    archive: PathBuf,
    checkpoint: PathBuf,
    /// A regular file; outputs below it cannot be created.
    blocker: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("spec.json");
    std::fs::write(&spec, r#"{"n_subjects":4,"n_channels":4,"trials_per_class":2,"cvc_real_per_subject":2,"cvc_pseudo_per_subject":2}"#).unwrap();
    let synth = root.join("syn");
    let archive = root.join("erp.epo");
    let train = root.join("train");
    assert_eq!(run(&["synth", "--spec", s(&spec), "--output", s(&synth), "--seed", "1"]).0, 0);
    assert_eq!(run(&["preprocess", "--input", s(&synth), "--output", s(&archive), "--feature", "erp", "--seed", "1"]).0, 0);
    let mut args = vec!["train", "--input", s(&archive), "--output", s(&train), "--task", "voicing", "--seed", "1"];
    args.extend(QUICK);
    assert_eq!(run(&args).0, 0);
    let blocker = root.join("blocker");
    std::fs::write(&blocker, "").unwrap();
    Fixture { _dir: dir, checkpoint: train.join("checkpoint.bin"), root, synth, archive, blocker }
}

#[test]
fn synth_codes() {
    let f = fixture();
    let out = f.root.join("s2");
    assert_eq!(run(&["synth", "--output", s(&out), "--seed", "2", "--subjects", "1"]).0, 0);
    let (code, err) = run(&["synth", "--output", s(&out), "--seed", "2", "--subjects", "0"]);
    assert_eq!(code, 2, "{err}");
    let bad = f.root.join("bad.json");
    std::fs::write(&bad, r#"{"n_subjects": "four"}"#).unwrap();
    let (code, err) = run(&["synth", "--spec", s(&bad), "--output", s(&out), "--seed", "2"]);
    assert_eq!(code, 2);
    assert!(err.contains("n_subjects"), "{err}");
    assert_eq!(run(&["synth", "--output", s(&out)]).0, 2);
    let (code, err) = run(&["synth", "--output", s(&f.blocker.join("x")), "--seed", "2", "--subjects", "1"]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn preprocess_codes() {
    let f = fixture();
    let out = f.root.join("dda.epo");
    assert_eq!(run(&["preprocess", "--input", s(&f.synth), "--output", s(&out), "--feature", "dda", "--seed", "1"]).0, 0);
    let missing = f.root.join("nothing-here");
    assert_eq!(run(&["preprocess", "--input", s(&missing), "--output", s(&out), "--feature", "erp", "--seed", "1"]).0, 2);
    assert_eq!(run(&["preprocess", "--input", s(&f.synth), "--output", s(&out), "--feature", "pca", "--seed", "1"]).0, 2);
    let blocked = f.blocker.join("x.epo");
    let (code, err) = run(&["preprocess", "--input", s(&f.synth), "--output", s(&blocked), "--feature", "dda", "--seed", "1"]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn train_codes() {
    let f = fixture();
    let base = |out: &Path, split: &'static str| -> Vec<String> {
        let mut v: Vec<String> = ["train", "--input", s(&f.archive), "--output", s(out), "--task", "phoneme", "--seed", "3", "--split", split]
            .map(String::from)
            .to_vec();
        v.extend(QUICK.map(String::from));
        v
    };
    let call = |v: &[String]| run(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(call(&base(&f.root.join("t2"), "fixed")).0, 0);
    assert_eq!(call(&base(&f.root.join("t3"), "loso")).0, 2);
    let bad_cfg = f.root.join("model.json");
    std::fs::write(&bad_cfg, r#"{"d_model": 15}"#).unwrap();
    let mut v = base(&f.root.join("t4"), "fixed");
    v.retain(|a| a != "--tiny");
    v.extend(["--model-config".to_string(), s(&bad_cfg).to_string()]);
    assert_eq!(call(&v).0, 2);
    let (code, err) = call(&base(&f.blocker.join("t"), "fixed"));
    assert_eq!(code, 1, "{err}");
}

#[test]
fn evaluate_codes() {
    let f = fixture();
    let out = f.root.join("ev");
    let ckpt = ["evaluate", "--input", s(&f.archive), "--checkpoint", s(&f.checkpoint), "--eval-set", "val", "--seed", "1"];
    assert_eq!(run(&[&ckpt[..], &["--output", s(&out)]].concat()).0, 0);
    let lr = ["evaluate", "--input", s(&f.archive), "--decoder", "lr", "--task", "voicing", "--seed", "1"];
    assert_eq!(run(&[&lr[..], &["--output", s(&f.root.join("lr"))]].concat()).0, 0);
    // LOSO without a task, ensemble with one checkpoint, missing checkpoint
    assert_eq!(run(&["evaluate", "--input", s(&f.archive), "--output", s(&out), "--decoder", "lr", "--seed", "1"]).0, 2);
    assert_eq!(run(&[&ckpt[..], &["--output", s(&out), "--ensemble"]].concat()).0, 2);
    let gone = f.root.join("gone.bin");
    assert_eq!(run(&["evaluate", "--input", s(&f.archive), "--checkpoint", s(&gone), "--output", s(&out), "--seed", "1"]).0, 2);
    let (code, err) = run(&[&lr[..], &["--output", s(&f.blocker.join("lr"))]].concat());
    assert_eq!(code, 1, "{err}");
}

#[test]
fn controls_codes() {
    let f = fixture();
    let base = ["controls", "--input", s(&f.archive), "--task", "manner", "--bootstrap", "50", "--seed", "1"];
    assert_eq!(run(&[&base[..], &["--output", s(&f.root.join("c")), "--mask-early", "--permute", "3"]].concat()).0, 0);
    assert_eq!(run(&[&base[..], &["--output", s(&f.root.join("c2")), "--jobs", "0"]].concat()).0, 2);
    let missing = f.root.join("none.epo");
    assert_eq!(run(&["controls", "--input", s(&missing), "--output", s(&f.root.join("c3")), "--task", "manner", "--seed", "1"]).0, 2);
    let (code, err) = run(&[&base[..], &["--output", s(&f.blocker.join("c"))]].concat());
    assert_eq!(code, 1, "{err}");
}
