//! The command-line tool driven as a subprocess.

use std::path::Path;
use std::process::{Command, Output};

fn t2ldm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t2ldm")).args(args).env("T2LDM_THREADS", "2").output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path, ext: &str) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().filter_map(|e| e.ok()?.file_name().into_string().ok()).filter(|n| n.ends_with(ext)).collect();
    v.sort();
    v
}

#[test]
fn help_lists_every_verb() {
    let out = t2ldm(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for verb in ["synth", "annotate", "train", "sample", "control-train", "upsample", "downsample", "eval", "project"] {
        assert!(text.contains(verb), "help lacks {verb}:\n{text}");
    }
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(t2ldm(&["fly"]).status.code(), Some(1));
    assert_eq!(t2ldm(&["synth"]).status.code(), Some(1), "missing --out");
    assert_eq!(t2ldm(&["synth", "--out", p(dir.path()), "--height", "0"]).status.code(), Some(1));
    let missing = dir.path().join("nothing.ckpt");
    let out = t2ldm(&["sample", "--ckpt", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing.ckpt"));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "scenes = lots\n").unwrap();
    assert_eq!(t2ldm(&["synth", "--out", p(dir.path()), "--config", p(&cfg)]).status.code(), Some(1));
}

#[test]
fn synth_is_reproducible_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(t2ldm(&["synth", "--scenes", "3", "--out", p(d), "--seed", "4", "--template", "wea_qty"]).status.success());
    }
    assert_eq!(files(&a, ".bin"), ["000000.bin", "000001.bin", "000002.bin"]);
    for name in files(&a, ".bin").iter().chain(&files(&a, ".jsonl")) {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["verb"], "synth");
    assert_eq!(manifest["options"]["scenes"], 3);
    assert_eq!(manifest["options"]["seed"], 4);
}

#[test]
fn config_files_override_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(&cfg, "scenes = 2\nscene.cars = 1, 1\nscene.street_width = null\n").unwrap();
    let out = dir.path().join("s");
    assert!(t2ldm(&["synth", "--scenes", "5", "--out", p(&out), "--config", p(&cfg)]).status.success());
    assert_eq!(files(&out, ".bin").len(), 2);
    for side in files(&out, ".jsonl") {
        let rec: serde_json::Value = serde_json::from_str(std::fs::read_to_string(out.join(side)).unwrap().trim()).unwrap();
        let cars = rec["boxes"].as_array().unwrap().iter().filter(|b| b["class"] == "car").count();
        assert!(cars <= 1);
        assert!(rec["labels"].as_array().unwrap().iter().all(|l| l != 1), "no walls on open ground");
    }
}

#[test]
fn pipeline_produces_samples_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model, samples, report) = (dir.path().join("data"), dir.path().join("model"), dir.path().join("samples"), dir.path().join("report"));
    assert!(t2ldm(&["synth", "--scenes", "4", "--out", p(&data)]).status.success());
    assert!(t2ldm(&["annotate", "--input", p(&data), "--out", p(&data), "--template", "qty_ori"]).status.success());
    let ann = std::fs::read_to_string(data.join("annotations.jsonl")).unwrap();
    assert_eq!(ann.lines().count(), 4);
    let ok = t2ldm(&["train", "--data", p(&data), "--annotations", p(&data.join("annotations.jsonl")), "--out", p(&model), "--steps", "4"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(std::fs::read_to_string(model.join("loss.csv")).unwrap().lines().count(), 5);
    let ckpt = model.join("model.ckpt");
    assert!(t2ldm(&["sample", "--ckpt", p(&ckpt), "--prompt", "One car.", "--n", "2", "--out", p(&samples), "--seed", "1"]).status.success());
    for ext in [".bin", "_bev.png", "_range.png", ".jsonl"] {
        assert_eq!(files(&samples, ext).len(), 2, "{ext}");
    }
    let out = t2ldm(&["eval", "--gen", p(&samples), "--ref", p(&data), "--out", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(report.join("report.json")).unwrap()).unwrap();
    for key in ["jsd", "mmd_e4", "tbr_pct", "n_generated", "n_reference"] {
        assert!(json.get(key).is_some(), "report lacks {key}: {json}");
    }
    assert_eq!(json["n_generated"], 2);
    assert!((0.0..=1.0).contains(&json["jsd"].as_f64().unwrap()));
    let stdout: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout, json);
}
