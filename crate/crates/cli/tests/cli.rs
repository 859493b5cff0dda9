use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn weldscan(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weldscan"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("WELDSCAN_OUTPUT_ROOT")
        .output()
        .expect("spawn weldscan")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = weldscan(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn error_json(o: &Output) -> Value {
    assert!(!o.status.success());
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.trim()).expect("stderr is one JSON line")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("read")).expect("json")
}

#[test]
fn synth_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--set", "synth.images=3", "synth"]);
    let ds = read_json(&dir.path().join("dataset/manifest.json"));
    assert_eq!(ds["images"].as_array().unwrap().len(), 3);
    let run = read_json(&dir.path().join("manifests/synth.json"));
    assert_eq!(run["command"], "synth");
    assert_eq!(run["seed"], 7);
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(run["outputs"][0], "dataset/manifest.json");
}

#[test]
fn rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(d.path(), &["--set", "synth.images=3", "synth"]);
    }
    for f in ["dataset/manifest.json", "dataset/image_0001.pgm", "dataset/gt_0002.pgm"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let hash = |d: &Path| read_json(&d.join("manifests/synth.json"))["config_hash"].clone();
    assert_eq!(hash(a.path()), hash(b.path()));
}

#[test]
fn seed_changes_hash_and_data() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["--set", "synth.images=2", "synth"]);
    ok(b.path(), &["--set", "synth.images=2", "--seed", "8", "synth"]);
    let ha = read_json(&a.path().join("manifests/synth.json"))["config_hash"].clone();
    let hb = read_json(&b.path().join("manifests/synth.json"))["config_hash"].clone();
    assert_ne!(ha, hb);
    assert_ne!(
        fs::read(a.path().join("dataset/image_0000.pgm")).unwrap(),
        fs::read(b.path().join("dataset/image_0000.pgm")).unwrap()
    );
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train", "experiment", "eval"] {
        let e = error_json(&weldscan(dir.path(), &[cmd]));
        assert_eq!(e["error"]["kind"], "missing_input", "{cmd}");
        assert!(e["error"]["message"].as_str().unwrap().contains("weldscan synth"), "{cmd}");
    }
    ok(dir.path(), &["--set", "synth.images=4", "synth"]);
    let e = error_json(&weldscan(dir.path(), &["infer"]));
    assert_eq!(e["error"]["kind"], "missing_input");
    let e = error_json(&weldscan(dir.path(), &["report"]));
    assert_eq!(e["error"]["kind"], "missing_input");
}

#[test]
fn bad_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = weldscan(dir.path(), &["--set", "nnet.train.no_such_key=1", "show-config"]);
    assert!(!error_json(&o)["error"]["message"].as_str().unwrap().is_empty());
    let o = ok(dir.path(), &["--set", "nnet.train.max_steps=123", "show-config"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("max_steps = 123"));
}

#[test]
fn perfect_predictions_score_every_flaw() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    let preds = dir.path().join("perfect");
    fs::create_dir_all(&preds).unwrap();
    for entry in fs::read_dir(dir.path().join("dataset")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if let Some(rest) = name.strip_prefix("gt_") {
            fs::copy(dir.path().join("dataset").join(&name), preds.join(format!("pred_{rest}"))).unwrap();
        }
    }
    ok(dir.path(), &["eval", "--predictions", preds.to_str().unwrap()]);
    let m = read_json(&dir.path().join("eval/metrics.json"));
    let row = &m["metrics"];
    assert!(row["flaws"].as_u64().unwrap() > 0);
    assert_eq!(row["hits"], row["flaws"]);
    assert_eq!(row["pod_status"], "degenerate");
    assert!(row["sizing_rms_mm"].as_f64().unwrap() < 1e-9);
    assert_eq!(row["false_calls_per_image"], 0.0);
}
