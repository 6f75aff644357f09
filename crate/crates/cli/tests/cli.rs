use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vdpm::scenegen::Snippet;

const TINY: &str = r#"{
  "model": {
    "image_width": 16, "image_height": 16, "patch_size": 8, "embed_dim": 8, "backbone_depth": 4,
    "heads": 2, "tap_layers": [0, 1, 2, 3], "decoder_depth": 2, "register_tokens": 1,
    "head_hidden_dim": 8, "mlp_ratio": 2, "time_frequencies": 2
  },
  "generator": { "width": 16, "height": 16, "background_points": 600, "points_per_object": [100, 200] },
  "train": {
    "snippet_lengths": [2, 3], "batch_size_by_length": { "2": 2, "3": 1 }, "base_lr": 0.003,
    "warmup_steps": 1, "total_steps": 4, "val_snippets": 2, "val_length": 3,
    "eval_every": 2, "checkpoint_every": 2
  },
  "two_view": { "trials": 4 },
  "tracking": { "frames": 4, "trials": 2 },
  "depth_pose": { "seq_len": 8, "window": 4, "stride": 2, "trials": 2 }
}"#;

fn vdpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdpm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vdpm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(args: &[&str]) -> String {
    let out = vdpm(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap().to_string();
    assert!(line.starts_with("error: "), "{err}");
    line
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

/// Table cells after the leading label column.
fn numbers(table: &str) -> Vec<f64> {
    table
        .lines()
        .skip(2)
        .flat_map(|l| l.split_whitespace().skip(1).filter_map(|c| c.parse::<f64>().ok()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn oracle_two_view_table_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let table = ok(&["eval-2view", "--config", &cfg, "--oracle", "--margin", "8"]);
    assert!(table.contains("P_0(t_1)") && table.contains("P_1(t_0)"), "{table}");
    let values = numbers(&table);
    assert_eq!(values.len(), 4, "{table}");
    assert!(values.iter().all(|&v| v == 0.0), "{table}");
}

#[test]
fn oracle_tracking_and_depth_pose_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let json = dir.path().join("track.json");
    ok(&["eval-track", "--config", &cfg, "--oracle", "--json", json.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["epe"], 0.0);
    assert_eq!(report["frames"], 4);
    let table = ok(&["eval-depthpose", "--config", &cfg, "--oracle", "--window", "4", "--stride", "2"]);
    assert!(table.contains("Abs Rel") && table.contains("ATE"), "{table}");
}

#[test]
fn one_frame_snippet_exports_one_vertex_per_valid_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let snippets = dir.path().join("snippets");
    ok(&["gen", "--config", &cfg, "--out", snippets.to_str().unwrap(), "--count", "2", "--frames", "1"]);
    let path = snippets.join("snippet_0001.vdps");
    let s = Snippet::load(&path).unwrap();
    assert_eq!(s.len(), 1);
    let ply = dir.path().join("cloud.ply");
    ok(&["export-ply", "--snippet", path.to_str().unwrap(), "--out", ply.to_str().unwrap()]);
    let v = vdpm::ply::read(&ply).unwrap();
    assert_eq!(v.positions.len(), s.gt_time_variant[0].valid_count());
    assert!(fs::read(&ply).unwrap().starts_with(b"ply\nformat binary_little_endian 1.0\n"));
}

#[test]
fn same_seed_and_config_give_identical_metrics_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["train", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        fs::read(out.join("metrics.jsonl")).unwrap()
    };
    let a = run("a", "3");
    assert!(!a.is_empty());
    assert_eq!(a, run("b", "3"));
    assert_ne!(a, run("c", "4"));
}

#[test]
fn trained_checkpoint_evaluates_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--steps", "2"]);
    let ckpt = out.join("checkpoint.vdpm");
    let table = ok(&["eval-2view", "--config", &cfg, "--ckpt", ckpt.to_str().unwrap(), "--trials", "2"]);
    assert!(numbers(&table).iter().all(|v| v.is_finite() && *v > 0.0), "{table}");
    let ply = dir.path().join("pred.ply");
    ok(&["export-ply", "--config", &cfg, "--ckpt", ckpt.to_str().unwrap(), "--time-index", "2", "--out", ply.to_str().unwrap()]);
    assert!(!vdpm::ply::read(&ply).unwrap().positions.is_empty());
}

#[test]
fn oracle_windows_fuse_with_near_zero_residual() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let windows = dir.path().join("windows");
    ok(&["predict-windows", "--config", &cfg, "--oracle", "--out", windows.to_str().unwrap()]);
    let fused = dir.path().join("fused");
    let msg = ok(&["align", "--windows-dir", windows.to_str().unwrap(), "--out", fused.to_str().unwrap()]);
    assert!(msg.starts_with("fused 3 windows over 8 frames"), "{msg}");
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fused.join("transforms.json")).unwrap()).unwrap();
    assert!(doc["residual"].as_f64().unwrap() < 1e-6, "{doc}");
    let tum = fs::read_to_string(fused.join("trajectory.txt")).unwrap();
    assert_eq!(tum.lines().filter(|l| !l.starts_with('#')).count(), 8);
    assert!(fused.join("depth.vdpd").exists());
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let report = ok(&["gradcheck", "--config", &cfg, "--trials", "5"]);
    assert!(report.lines().count() > 15);
    assert!(report.lines().all(|l| l.starts_with("PASS ")), "{report}");
}

#[test]
fn ablation_prints_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ablation");
    let text = ok(&["ablation", "--config", &cfg, "--budget", "1", "--out", out.to_str().unwrap()]);
    assert!(text.contains("P_0(t_1)") && text.contains("P_1(t_0)"), "{text}");
    assert_eq!(text.lines().last().unwrap().matches(" < ").count(), 3, "{text}");
}

#[test]
fn unknown_config_key_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, "{\n  \"model\": {\n    \"embed_dimension\": 8\n  }\n}\n").unwrap();
    let line = error_line(&["eval-2view", "--config", p.to_str().unwrap(), "--oracle"]);
    assert!(line.contains("model.embed_dimension"), "{line}");
    assert!(line.contains("line 3"), "{line}");
}

#[test]
fn missing_files_and_bad_flags_fail_cleanly() {
    let line = error_line(&["eval-2view", "--ckpt", "/nonexistent/model.vdpm"]);
    assert!(line.contains("/nonexistent/model.vdpm"), "{line}");
    let line = error_line(&["align", "--windows-dir", "/nonexistent/windows", "--out", "/tmp/x"]);
    assert!(line.contains("/nonexistent/windows"), "{line}");
    assert!(!vdpm(&["eval-2view", "--oracle", "--margin", "3"]).status.success());
    assert!(!vdpm(&["eval-2view"]).status.success());
}

#[test]
fn thread_count_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_vdpm"))
        .env("VDPM_THREADS", "0")
        .args(["gradcheck", "--trials", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("VDPM_THREADS"));
}
