//! Command-level behaviour of the `qptad` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use walkdir::WalkDir;

fn qptad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qptad")).args(args).output().expect("run qptad")
}

fn ok(args: &[&str]) -> String {
    let out = qptad(args);
    assert!(out.status.success(), "qptad {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "decoder": {"L": 1, "N_q": 4, "N_s": 4, "D": 8, "D_in": 8, "num_classes": 3, "score_thresh": 0.0,
              "mamba": {"M": 1, "heads": 2, "N_state": 2}},
  "synth": {"num_videos": 2, "num_classes": 3, "D_in": 8, "num_frames": 256}
}"#;

fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("run.json");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    ok(&["gen-synth", "--config", s(&cfg), "--out", s(&data)]);
    (cfg, data)
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_synth_is_deterministic_and_manifest_lists_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-synth", "--seed", "7", "--out", s(&a)]);
    ok(&["gen-synth", "--seed", "7", "--out", s(&b)]);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let mut listed: Vec<PathBuf> = manifest["videos"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| PathBuf::from(v["features"].as_str().unwrap()))
        .chain([PathBuf::from("manifest.json"), PathBuf::from(manifest["annotations"].as_str().unwrap())])
        .collect();
    listed.sort();
    assert_eq!(listed, ta.into_iter().map(|(p, _)| p).collect::<Vec<_>>());
}

#[test]
fn zero_videos_give_an_empty_manifest_and_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"synth": {"num_videos": 0}}"#).unwrap();
    let data = dir.path().join("empty");
    ok(&["gen-synth", "--config", s(&cfg), "--out", s(&data)]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["videos"].as_array().unwrap().len(), 0);

    let (tiny_cfg, tiny_data) = setup(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&tiny_cfg), "--data", s(&tiny_data), "--out", s(&run), "--steps", "1"]);
    let preds = dir.path().join("p.json");
    ok(&["infer", "--data", s(&data), "--checkpoint", s(&run.join("checkpoint")), "--out", s(&preds)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&preds).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 0);
}

#[test]
fn one_step_writes_one_row_and_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let one = dir.path().join("one");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&one), "--steps", "1"]);
    let log = fs::read_to_string(one.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
    assert!(log.starts_with("step,epoch,lr,total,cls,l1,iou,grad_norm\n"));

    let full = dir.path().join("full");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full), "--steps", "12"]);
    let part = dir.path().join("part");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&part), "--steps", "5"]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&part), "--steps", "12", "--resume"]);
    assert_eq!(fs::read_to_string(part.join("loss.csv")).unwrap(), fs::read_to_string(full.join("loss.csv")).unwrap());
    assert_eq!(
        fs::read(part.join("checkpoint/model.qpck")).unwrap(),
        fs::read(full.join("checkpoint/model.qpck")).unwrap()
    );
}

#[test]
fn inference_is_bit_identical_and_eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--steps", "3"]);
    let (p1, p2) = (dir.path().join("p1.json"), dir.path().join("p2.json"));
    let ckpt = run.join("checkpoint");
    ok(&["infer", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&p1)]);
    let out = Command::new(env!("CARGO_BIN_EXE_qptad"))
        .env("QPTAD_THREADS", "1")
        .args(["infer", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&p2)])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    let report = dir.path().join("r.json");
    let stdout = ok(&["eval", "--pred", s(&p1), "--gt", s(&data.join("annotations.json")), "--out", s(&report)]);
    assert!(stdout.contains("F1@0.5"), "{stdout}");
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let gts: serde_json::Value = serde_json::from_slice(&fs::read(data.join("annotations.json")).unwrap()).unwrap();
    let n_gt: usize = gts.as_array().unwrap().iter().map(|v| v["instances"].as_array().unwrap().len()).sum();
    assert_eq!(r["tp"].as_u64().unwrap() + r["fn"].as_u64().unwrap(), n_gt as u64);
}

#[test]
fn eval_rejects_mismatched_videos_with_their_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("p.json"), dir.path().join("g.json"));
    fs::write(&p, r#"[{"video_id": "a", "fps": 10, "num_frames": 10, "instances": []}]"#).unwrap();
    fs::write(&g, r#"[{"video_id": "b", "fps": 10, "num_frames": 10, "instances": []}]"#).unwrap();
    let out = qptad(&["eval", "--pred", s(&p), "--gt", s(&g), "--out", s(&dir.path().join("r.json"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"a\"") && err.contains("\"b\""), "{err}");
}

#[test]
fn config_rejects_unknown_keys_and_invalid_values_by_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"decoder": {"layers": 2}}"#).unwrap();
    let out = qptad(&["config", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("layers"));

    let out = qptad(&["config", "--layers", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("decoder.L"));
}

#[test]
fn gradcheck_passes_clean_and_fails_with_injected_fault() {
    let stdout = ok(&["gradcheck", "--seeds", "1"]);
    assert!(stdout.contains("gradcheck PASS"), "{stdout}");
    assert!(stdout.contains("worst "), "{stdout}");

    let out = qptad(&["gradcheck", "--seeds", "1", "--inject-fault"]);
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradcheck FAIL"), "{stdout}");
}

#[test]
fn bench_scan_prints_one_row_per_length() {
    let stdout = ok(&["bench-scan", "--lengths", "8,32,128", "--repeats", "1"]);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{stdout}");
    assert!(rows[2].trim_start().starts_with("128"));
    assert!(!qptad(&["bench-scan", "--repeats", "0"]).status.success());
}
