use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn got(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_got")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path) {
    let o = got(&["synth-data", "--out", p(dir), "--count", "6", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("annotations.jsonl").exists() && dir.join("splits.json").exists());
}

fn train(data: &Path, out: &Path, task: &str) -> PathBuf {
    let cfg = out.with_extension("cfg");
    std::fs::write(&cfg, format!("width = toy\ntask = {task}\niterations = 2\n")).unwrap();
    let o = got(&["train", "--config", p(&cfg), "--dataset", p(data), "--split", "train", "--seed", "1", "--out", p(out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(stdout(&o).trim())
}

#[test]
fn train_evaluate_detect_retrieve() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cap = train(&data, &tmp.path().join("cap"), "caption");
    assert!(cap.exists());
    let ret = train(&data, &tmp.path().join("ret"), "retrieval");

    let report = tmp.path().join("report.json");
    let o = got(&["evaluate", "--checkpoint", p(&cap), "--dataset", p(&data), "--split", "test", "--out", p(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Bleu_4"));
    let j: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(j["CIDEr"].is_number());

    let o = got(&["evaluate", "--checkpoint", p(&ret), "--dataset", p(&data), "--sequential"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("R@1"));

    let image = data.join("images").read_dir().unwrap().next().unwrap().unwrap().path();
    let o = got(&["detect", "--checkpoint", p(&cap), "--image", p(&image)]);
    assert!(o.status.success());
    let d: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!d["objects"].as_array().unwrap().is_empty());

    let o = got(&["retrieve", "--checkpoint", p(&ret), "--image", p(&image), "--query", "a red square"]);
    assert!(o.status.success());
    let first = stdout(&o);
    let o = got(&["retrieve", "--checkpoint", p(&ret), "--image", p(&image), "--query", "a red square"]);
    assert_eq!(first, stdout(&o));

    // task mismatch and an empty query are validation errors
    let o = got(&["retrieve", "--checkpoint", p(&cap), "--image", p(&image), "--query", "a red square"]);
    assert_eq!(o.status.code(), Some(2));
    let o = got(&["retrieve", "--checkpoint", p(&ret), "--image", p(&image), "--query", " "]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = fast\n").unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let o = got(&["train", "--config", p(&cfg), "--dataset", p(&data), "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = got(&["train", "--set", "iterations=1", "--set", "width=toy", "--dataset", p(&data), "--split", "nope", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = got(&["detect", "--checkpoint", p(&tmp.path().join("missing.ckpt")), "--image", "x.png"]);
    assert_eq!(o.status.code(), Some(3));
    let o = got(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn toy_flag_starts_from_desk_scale_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let out = tmp.path().join("ret");
    let o = got(&["train", "--toy", "--set", "task=retrieval", "--set", "iterations=1", "--dataset", p(&data), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: Vec<String> = std::fs::read_to_string(out.join("train.cfg")).unwrap().lines().map(|l| l.replace(' ', "")).collect();
    for want in ["task=retrieval", "width=toy", "learning_rate=0.005", "iterations=1"] {
        assert!(cfg.iter().any(|l| l == want), "missing {want} in {cfg:?}");
    }
}
