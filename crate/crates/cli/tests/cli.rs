use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn eseg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eseg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = eseg(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {line}"))
}

fn summary(model: &str, dir: &Path) -> (f64, f64) {
    ok(&["summarize", "--model", model, "--json", "cost.json"], dir);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("cost.json")).unwrap()).unwrap();
    (v["total_params"].as_f64().unwrap(), v["total_flops"].as_f64().unwrap())
}

#[test]
fn summarize_matches_published_costs() {
    let d = tempfile::tempdir().unwrap();
    for (model, params, flops) in [("eseg-s", 6.9e6, 34.5e9), ("eseg-l", 70.5e6, 343e9)] {
        let (p, f) = summary(model, d.path());
        assert!((p / params - 1.0).abs() <= 0.10, "{model} params {p}");
        assert!((f / flops - 1.0).abs() <= 0.15, "{model} flops {f}");
    }
    let table = ok(&["summarize", "--model", "eseg-s"], d.path());
    assert!(table.contains("backbone") && table.contains("decoder") && table.contains("total"));
}

#[test]
fn ablate_levels_csv() {
    let d = tempfile::tempdir().unwrap();
    let csv = ok(&["ablate-levels", "--model", "eseg-s", "--max-levels", "5,9"], d.path());
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "P2-P5");
    assert_eq!(rows[1][1], "P2-P9");
    let dp: f64 = rows[1][4].parse().unwrap();
    let df: f64 = rows[1][5].parse().unwrap();
    assert!((0.2e6..=0.8e6).contains(&dp), "{dp}");
    assert!(df <= 1.5, "{df}");
}

#[test]
fn ablate_fusion_csv() {
    let d = tempfile::tempdir().unwrap();
    let csv = ok(&["ablate-fusion", "--out", "fusion.csv"], d.path());
    assert!(csv.is_empty());
    let text = std::fs::read_to_string(d.path().join("fusion.csv")).unwrap();
    let ratio: f64 = text
        .lines()
        .nth(2)
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((ratio - 1.0).abs() < 0.2, "{text}");
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let d = tempfile::tempdir().unwrap();
    let e = error_json(&eseg(&["summarize", "--model", "eseg-xl"], d.path()));
    assert_eq!(e["error"], "config");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("eseg-s") && msg.contains("eseg-lite-l"), "{msg}");

    let out = eseg(&["summarize", "--input-hw", "12"], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    let e = error_json(&eseg(&["eval", "--ckpt", "missing.eseg", "--data", "."], d.path()));
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("missing.eseg"));

    std::fs::write(d.path().join("bad.eseg"), b"not a checkpoint at all").unwrap();
    let e = error_json(&eseg(&["eval", "--ckpt", "bad.eseg", "--data", "."], d.path()));
    assert_eq!(e["error"], "format");

    let e = error_json(&eseg(&["gen-data", "--out", "x", "--classes", "1"], d.path()));
    assert_eq!(e["error"], "config");
}

#[test]
fn gradcheck_reports_every_case() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--seed", "1", "--random-graphs", "5"], d.path());
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines.iter().all(|l| l.starts_with("PASS")), "{out}");
    assert!(lines.iter().any(|l| l.contains("batch_norm_train")));
    assert_eq!(lines.iter().filter(|l| l.contains("random_graph_")).count(), 5);
}

#[test]
fn gen_data_is_byte_deterministic() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&["gen-data", "--out", out, "--count", "5", "--seed", "4"], d.path());
    }
    for f in ["manifest.json", "images/00004.ppm", "labels/00004.pgm"] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        let b = std::fs::read(d.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn train_eval_pseudolabel_roundtrip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["gen-data", "--out", "data", "--count", "8", "--seed", "1"], p);
    ok(&["gen-data", "--out", "val", "--count", "4", "--seed", "2"], p);
    std::fs::write(
        p.join("job.json"),
        r#"{"model": "desk-toy", "data": "data", "eval_data": "val", "out_dir": "run",
            "train": {"lr0": 0.05, "total_steps": 4, "momentum": 0.9, "weight_decay": 5e-5,
                      "batch": 2, "ema_decay": 0.9, "seed": 3}}"#,
    )
    .unwrap();
    ok(&["train", "--config", "job.json"], p);
    ok(&["train", "--config", "job.json", "--out", "run2"], p);
    for f in ["checkpoint.eseg", "trace.csv", "metrics.json"] {
        assert_eq!(
            std::fs::read(p.join("run").join(f)).unwrap(),
            std::fs::read(p.join("run2").join(f)).unwrap(),
            "{f}"
        );
    }
    let trace = std::fs::read_to_string(p.join("run/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);

    let report: Value =
        serde_json::from_str(&ok(&["eval", "--ckpt", "run/checkpoint.eseg", "--data", "val"], p)).unwrap();
    let train_metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["miou"], train_metrics["raw"]["miou"]);
    assert_eq!(report["pixels"], 4 * 64 * 64);

    ok(
        &[
            "pseudolabel",
            "--model",
            "run/checkpoint.eseg",
            "--images",
            "val/images",
            "--out",
            "pl",
            "--scales",
            "1",
        ],
        p,
    );
    let label = std::fs::read(p.join("pl/00003.pgm")).unwrap();
    assert!(label.starts_with(b"P5"));
    assert_eq!(std::fs::read_dir(p.join("pl")).unwrap().count(), 4);
}

#[test]
fn rewrite_pipeline_on_exported_graph() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["export", "--model", "eseg-lite-s", "--out", "g.json"], p);
    ok(
        &[
            "rewrite",
            "--pass",
            "swap-activation",
            "--in",
            "g.json",
            "--out",
            "g2.json",
            "--report",
            "r.json",
        ],
        p,
    );
    let r: Value = serde_json::from_str(&std::fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    // the Lite model has no SiLU to swap
    assert_eq!(r[0]["matches"], 0);
    assert_eq!(
        std::fs::read(p.join("g.json")).unwrap(),
        std::fs::read(p.join("g2.json")).unwrap()
    );

    std::fs::write(
        p.join("m.json"),
        r#"{"name": "x", "family": "eseg", "width_mult": 1.0, "depth_mult": 1.0,
        "fpn_channels": 96, "fpn_repeats": 3, "min_level": 2, "max_level": 9,
        "conv_style": "separable", "activation": "silu"}"#,
    )
    .unwrap();
    ok(
        &[
            "rewrite",
            "--pass",
            "shift-base-level",
            "--in",
            "m.json",
            "--out",
            "m3.json",
        ],
        p,
    );
    let m: Value = serde_json::from_str(&std::fs::read_to_string(p.join("m3.json")).unwrap()).unwrap();
    assert_eq!(m["min_level"], 3);
}
