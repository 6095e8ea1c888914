use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn compose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compose"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn compose")
}

fn json_out(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(compose(&["--help"]).status.code(), Some(0));
    assert_eq!(compose(&["--no-such-flag"]).status.code(), Some(2));
    assert_eq!(compose(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(compose(&["run"]).status.code(), Some(2));
}

#[test]
fn failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = compose(&[
        "run",
        "--ckpt",
        s(&dir.path().join("missing.ckpt")),
        "--pool",
        s(&fixtures().join("pool.tar")),
        "--image",
        s(&fixtures().join("background.png")),
        "--out",
        s(&dir.path().join("c.png")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}

#[test]
fn config_layers_and_defaults() {
    let v = json_out(&compose(&["config"]));
    assert_eq!(v["pipeline"]["filter"]["max_iou"], 0.3);
    assert_eq!(v["pipeline"]["filter"]["min_edge_distance"], 18.0);
    assert_eq!(v["pipeline"]["filter"]["min_area"], 2500.0);
    assert_eq!(v["size_threshold"], 0.4);
    assert_eq!(v["pipeline"]["scene"]["blur_sigma"], 3.2);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.json");
    std::fs::write(&file, r#"{"seed": 3, "size_threshold": 0.6, "pipeline": {"filter": {"min_area": 100}}}"#)
        .unwrap();
    let v = json_out(&compose(&[
        "--config",
        s(&file),
        "--seed",
        "11",
        "--set",
        "pipeline.filter.min_area=900",
        "config",
    ]));
    assert_eq!(v["seed"], 11);
    assert_eq!(v["size_threshold"], 0.6);
    assert_eq!(v["pipeline"]["filter"]["min_area"], 900.0);
    assert_eq!(v["pipeline"]["filter"]["max_iou"], 0.3);

    let bad = compose(&["--set", "size_threshold=-1", "config"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn run_then_render_reproduces_the_composite() {
    let dir = tempfile::tempdir().unwrap();
    let (composite, prov, rerender) = (
        dir.path().join("c.png"),
        dir.path().join("p.json"),
        dir.path().join("r.png"),
    );
    let pool = fixtures().join("pool.tar");
    let bg = fixtures().join("background.png");
    let v = json_out(&compose(&[
        "run",
        "--ckpt",
        s(&fixtures().join("placement.ckpt")),
        "--pool",
        s(&pool),
        "--image",
        s(&bg),
        "--n",
        "2",
        "--out",
        s(&composite),
        "--provenance",
        s(&prov),
    ]));
    assert_eq!(v["provenance"].as_array().unwrap().len(), 2);
    json_out(&compose(&[
        "render",
        "--pool",
        s(&pool),
        "--image",
        s(&bg),
        "--provenance",
        s(&prov),
        "--out",
        s(&rerender),
    ]));
    let a = image::open(&composite).unwrap().to_rgb8();
    let b = image::open(&rerender).unwrap().to_rgb8();
    assert_eq!(a, b);
    assert_ne!(a, image::open(&bg).unwrap().to_rgb8());
}

#[test]
fn predict_and_query() {
    let dir = tempfile::tempdir().unwrap();
    let heat = dir.path().join("h.png");
    let v = json_out(&compose(&[
        "net",
        "predict",
        "--ckpt",
        s(&fixtures().join("placement.ckpt")),
        "--image",
        s(&fixtures().join("background.png")),
        "--k",
        "2",
        "--heatmap",
        s(&heat),
    ]));
    assert_eq!(v["candidates"].as_array().unwrap().len(), 2);
    assert!(heat.exists());

    let v = json_out(&compose(&[
        "pool",
        "query",
        "--pool",
        s(&fixtures().join("pool.tar")),
        "--image",
        s(&fixtures().join("background.png")),
        "--box",
        "140,80,40,105",
        "--k",
        "9",
    ]));
    assert_eq!(v["outcome"], "hits");
    let hits = v["hits"].as_array().unwrap();
    assert!(!hits.is_empty() && hits.len() <= 9);
    let d: Vec<f64> = hits.iter().map(|h| h["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn synthetic_data_to_evaluation_report() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    let data = dir.path().join("data");
    json_out(&compose(&["--seed", "5", "data", "synth", "--out", s(&synth), "--count", "12"]));
    let built = json_out(&compose(&[
        "--network",
        "compact",
        "data",
        "build",
        "--annotations",
        s(&synth.join("annotations.json")),
        "--images",
        s(&synth.join("images")),
        "--out",
        s(&data),
    ]));
    assert!(built["samples"].as_u64().unwrap() > 0);
    let hist = dir.path().join("hist");
    let report = json_out(&compose(&[
        "--network",
        "compact",
        "eval",
        "--ckpt",
        s(&fixtures().join("placement.ckpt")),
        "--data",
        s(&data),
        "--histograms",
        s(&hist),
    ]));
    assert_eq!(report["n_samples"], built["samples"]);
    let p = report["position_correlation"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&p));
    assert!(hist.join("position.png").exists() && hist.join("size.png").exists());
}
