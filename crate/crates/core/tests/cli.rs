use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmt")).args(args).output().expect("spawn cmt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_dataset(dir: &Path) -> String {
    let data = dir.join("data");
    let out = cmt(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--set",
        "shapes=12",
        "--set",
        "resolution=32",
        "--set",
        "queries_per_shape=2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data.join("manifest.json").to_str().unwrap().to_string()
}

const TINY_MODEL: [&str; 12] = [
    "--set",
    "model.resolution=32",
    "--set",
    "model.d=8",
    "--set",
    "model.channels=[4,4,4]",
    "--set",
    "model.blocks=1",
    "--set",
    "model.heads=2",
    "--set",
    "validate=false",
];

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&cmt(&["frobnicate"])), 2);
    assert_eq!(code(&cmt(&["train"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("x");
    let out = cmt(&["generate", "--out", out_dir.to_str().unwrap(), "--set", "shapez=3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("`shapez`"), "{}", stderr(&out));
    let out = cmt(&["generate", "--out", out_dir.to_str().unwrap(), "--set", "resolution=abc"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("`resolution`"));
}

#[test]
fn nested_key_paths_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"d": 8, "hedas": 2}}"#).unwrap();
    let out = cmt(&[
        "train",
        "--manifest",
        "missing.json",
        "--out",
        dir.path().join("t").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("model.hedas"), "{}", stderr(&out));
}

#[test]
fn generate_and_validate_write_run_json() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path());
    let run: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "generate");
    assert_eq!(run["seed"], 3);
    assert_eq!(run["config"]["shapes"], 12);
    let val = dir.path().join("val");
    let out = cmt(&["validate", "--manifest", &manifest, "--out", val.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(val.join("run.json").exists());
}

#[test]
fn broken_manifest_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path());
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    let first = m["shapes"][0]["views"][0].as_str().unwrap();
    std::fs::remove_file(dir.path().join("data").join(first)).unwrap();
    let out = cmt(&["validate", "--manifest", &manifest]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn train_eval_and_viewpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path());
    let tr = dir.path().join("tr");
    let mut args = vec!["train", "--manifest", &manifest, "--out", tr.to_str().unwrap(), "--epochs", "1", "--quiet"];
    args.extend(TINY_MODEL);
    let out = cmt(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run: Value = serde_json::from_str(&std::fs::read_to_string(tr.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["model"]["d"], 8);
    assert_eq!(run["config"]["epochs"], 1);

    // a run.json is accepted as a config and reproduces the checkpoint
    let tr2 = dir.path().join("tr2");
    let run_json = tr.join("run.json");
    let out = cmt(&["train", "--manifest", &manifest, "--out", tr2.to_str().unwrap(), "--config", run_json.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(tr.join("model.ckpt")).unwrap(), std::fs::read(tr2.join("model.ckpt")).unwrap());

    let ckpt = tr.join("model.ckpt");
    let ev = dir.path().join("ev");
    let out = cmt(&["eval", "--manifest", &manifest, "--ckpt", ckpt.to_str().unwrap(), "--split", "train", "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["report.json", "roc.csv", "roc.svg", "scores.csv", "run.json"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let vp = dir.path().join("vp");
    let out = cmt(&["viewpoint", "--manifest", &manifest, "--ckpt", ckpt.to_str().unwrap(), "--split", "train", "--out", vp.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(vp.join("viewpoint.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20);

    let out = cmt(&["inspect", "--ckpt", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("after epoch 1"));
}

#[test]
fn loss_sweep_writes_one_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path());
    let sw = dir.path().join("sw");
    let mut args = vec!["sweep", "--manifest", &manifest, "--out", sw.to_str().unwrap(), "--axis", "loss", "--epochs", "1"];
    args.extend(TINY_MODEL);
    let out = cmt(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(sw.join("loss_ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "config,use_qv,use_vv,auc,accuracy");
    assert_eq!(rows.len(), 5);
    assert!(sw.join("loss/both/model.ckpt").exists());
}
