use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn flynet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flynet")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Nine tiny 32x32 datasets, three per stage.
fn tiny_corpus(dir: &Path, size: &str) -> PathBuf {
    let out = flynet(&[
        "synth",
        "--out",
        p(dir),
        "--datasets-per-stage",
        "3",
        "--frames",
        "6",
        "--input-size",
        size,
        "--seed",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.json")
}

const TINY: &[&str] = &[
    "--base-width",
    "4",
    "--input-size",
    "32",
    "--epochs",
    "2",
    "--batch-size",
    "4",
    "--samples-per-epoch",
    "16",
    "--shift-min",
    "2",
    "--shift-max",
    "8",
    "--k",
    "3",
];

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", p(manifest), "--out", p(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    flynet(&args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_corpus(&tmp.path().join("corpus"), "32");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = train(&manifest, dir, &["--seed", "9"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["checkpoint.flyn", "history.csv", "summary.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert_eq!(std::fs::read(a.join("checkpoint.flyn")).unwrap(), std::fs::read(b.join("checkpoint.flyn")).unwrap());
    let history = std::fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_loss,val_iou"));
    assert_eq!(history.lines().count(), 3);

    let seg = tmp.path().join("seg");
    let out = flynet(&[
        "segment",
        "--checkpoint",
        p(&a.join("checkpoint.flyn")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&seg),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(seg.join("predictions.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("dataset,frame_index,area_px2,mean_prob,iou"));
    assert_eq!(csv.lines().count(), 1 + 9 * 6);
    assert!(seg.join("larva-00").join("000000.pgm").is_file());

    let an = tmp.path().join("an");
    let out = flynet(&[
        "analyze",
        "--masks",
        p(&seg.join("larva-00")),
        "--truth",
        p(&tmp.path().join("corpus/larva-00/masks")),
        "--fps",
        "30",
        "--out",
        p(&an),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(an.join("larva-00_trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("frame_index,time_s,area_px2,diameter_px,iou"));
    let summary = read_json(&an.join("larva-00_summary.json"));
    assert_eq!(summary["settings"]["fps"], 30.0);
    assert!(summary["mean_iou"].is_number());
}

#[test]
fn config_file_fills_flags_and_command_line_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_corpus(&tmp.path().join("corpus"), "32");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"arch": "fcn", "epochs": 1, "lr": 0.002}"#).unwrap();
    let out_dir = tmp.path().join("run");
    let out = train(&manifest, &out_dir, &["--config", p(&cfg), "--lr", "0.003"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&out_dir.join("summary.json"));
    assert_eq!(s["config"]["arch"], "fcn");
    assert_eq!(s["config"]["max_epochs"], 2, "--epochs from TINY comes after the config file");
    assert_eq!(s["config"]["adam"]["lr"], 0.003);
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_corpus(&tmp.path().join("corpus"), "32");
    let out = train(&manifest, &tmp.path().join("run"), &["--lr", "1e6"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn bad_input_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = flynet(&["synth", "--out", p(tmp.path()), "--frames", "0"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&flynet(&["train", "--manifest", "nope.json"])), 2, "missing --out");
    let out = flynet(&["train", "--manifest", p(&tmp.path().join("nope.json")), "--out", p(tmp.path())]);
    assert_eq!(code(&out), 2);
    let out = flynet(&["analyze", "--masks", p(tmp.path()), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--fps"));
}

#[test]
fn segment_rejects_frames_of_the_wrong_size() {
    let tmp = tempfile::tempdir().unwrap();
    let small = tiny_corpus(&tmp.path().join("c32"), "32");
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&small, &run, &["--epochs", "1"])), 0);
    let big = tiny_corpus(&tmp.path().join("c48"), "48");
    let out = flynet(&[
        "segment",
        "--checkpoint",
        p(&run.join("checkpoint.flyn")),
        "--manifest",
        p(&big),
        "--out",
        p(&tmp.path().join("s")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("48x48"));
}

#[test]
fn gradcheck_fault_exits_1() {
    let out = flynet(&["gradcheck", "--seeds", "1", "--fault", "conv-sign-flip"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conv3x3"));
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    tiny_corpus(&a, "32");
    tiny_corpus(&b, "32");
    for rel in ["manifest.json", "pupa-02/frames/000005.pgm", "adult-00/masks/000001.pgm"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn crossval_writes_a_row_per_round_plus_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tiny_corpus(&tmp.path().join("corpus"), "32");
    let out_dir = tmp.path().join("cv");
    let mut args = vec!["crossval", "--manifest", p(&manifest), "--out", p(&out_dir)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--epochs", "1", "--arch", "fcn"]);
    let out = flynet(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(out_dir.join("rounds.csv")).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 2);
    assert!(lines[4].starts_with("mean,") && lines[5].starts_with("std,"));
    for r in 0..3 {
        assert!(out_dir.join(format!("round_{r:02}.flyn")).is_file());
        assert!(out_dir.join(format!("round_{r:02}_history.csv")).is_file());
    }
    assert!(read_json(&out_dir.join("summary.json"))["report"]["mean_iou"].is_number());
}

#[test]
fn analyze_ground_truth_recovers_the_configured_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("corpus");
    let out = flynet(&[
        "synth",
        "--out",
        p(&dir),
        "--datasets-per-stage",
        "3",
        "--frames",
        "600",
        "--input-size",
        "64",
        "--fps",
        "40",
        "--period",
        "0.6",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let masks = dir.join("adult-01/masks");
    let an = tmp.path().join("an");
    let out = flynet(&["analyze", "--masks", p(&masks), "--truth", p(&masks), "--fps", "40", "--out", p(&an)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&an.join("masks_summary.json"));
    let hr = s["report"]["hr_bpm"].as_f64().unwrap();
    assert!((hr - 100.0).abs() <= 2.0, "{hr} bpm");
    let trace = std::fs::read_to_string(an.join("masks_trace.csv")).unwrap();
    assert!(trace.lines().skip(1).all(|l| l.ends_with(",1.000000")));
}

#[test]
fn analyze_empty_masks_reports_missing_heart_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let masks = tmp.path().join("empty");
    std::fs::create_dir(&masks).unwrap();
    for i in 0..20 {
        let mut bytes = b"P5\n8 8\n255\n".to_vec();
        bytes.extend_from_slice(&[0u8; 64]);
        std::fs::write(masks.join(format!("{i:04}.pgm")), bytes).unwrap();
    }
    let an = tmp.path().join("an");
    let out = flynet(&["analyze", "--masks", p(&masks), "--fps", "30", "--out", p(&an)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&an.join("empty_summary.json"));
    assert!(s["report"]["hr_bpm"].is_null());
    assert!(s["report"]["reason"].as_str().unwrap().contains("peak"));
    let trace = std::fs::read_to_string(an.join("empty_trace.csv")).unwrap();
    assert!(trace.lines().nth(1).unwrap().ends_with(","), "iou column empty without ground truth");
}

#[test]
fn gradcheck_passes_and_prints_every_check() {
    let out = flynet(&["gradcheck", "--seeds", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 11);
}
