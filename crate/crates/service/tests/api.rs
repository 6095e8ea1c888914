use std::io::Cursor;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use compose_core::compositor::{compose, spec_from_provenance, ProvenanceEntry};
use compose_core::net::{NetworkConfig, PlacementNet};
use compose_core::pipeline::{build_scene, Palette, SceneConfig};
use compose_core::retrieval::{CandidatePool, ColorLayoutExtractor, PoolParams};
use compose_core::synthetic::{generate_scene, generate_scenes, synthetic_pool, SyntheticConfig};
use compose_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use image::{ImageFormat, RgbImage};
use serde_json::{json, Value};
use tower::ServiceExt;

fn extractor() -> ColorLayoutExtractor {
    ColorLayoutExtractor {
        dims: ColorLayoutExtractor::RAW_DIMS,
    }
}

fn net() -> PlacementNet {
    let mut net = PlacementNet::new(NetworkConfig::compact(), 7).unwrap();
    net.mark_trained();
    net
}

fn pool() -> CandidatePool {
    let scenes = generate_scenes(&SyntheticConfig::default(), 11, 1, 30);
    let ex = extractor();
    synthetic_pool(&scenes, &ex, PoolParams::for_extractor(&ex)).unwrap()
}

fn app_with(config: ServiceConfig) -> Router {
    router(Arc::new(AppState::new(net(), pool(), Box::new(extractor()), config)))
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

fn background() -> RgbImage {
    generate_scene(&SyntheticConfig::default(), 99, 1).background
}

fn encode(img: &RgbImage, format: ImageFormat) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, format).unwrap();
    buf.into_inner()
}

async fn send(app: &Router, method: Method, uri: &str, body: Body) -> (StatusCode, Bytes) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes())
}

async fn post_json(app: &Router, uri: &str, v: Value) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::POST, uri, Body::from(v.to_string())).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::GET, uri, Body::empty()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn new_session(app: &Router) -> String {
    let (s, b) = send(app, Method::POST, "/sessions", Body::from(encode(&background(), ImageFormat::Png))).await;
    assert_eq!(s, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&b).unwrap();
    v["id"].as_str().unwrap().to_string()
}

fn provenance(v: &Value) -> Vec<ProvenanceEntry> {
    serde_json::from_value(v["provenance"].clone()).unwrap()
}

#[tokio::test]
async fn upload_accepts_jpeg_and_reports_size() {
    let app = app();
    let img = RgbImage::from_fn(640, 480, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 80]));
    let (s, b) = send(&app, Method::POST, "/sessions", Body::from(encode(&img, ImageFormat::Jpeg))).await;
    assert_eq!(s, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["width"], 640);
    assert_eq!(v["height"], 480);
    let id = v["id"].as_str().unwrap();
    let (s, png) = send(&app, Method::GET, &format!("/sessions/{id}/background.png"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(image::load_from_memory(&png).unwrap().to_rgb8().dimensions(), (640, 480));
}

#[tokio::test]
async fn upload_rejects_truncated_and_non_images() {
    let app = app();
    let png = encode(&background(), ImageFormat::Png);
    let (s, _) = send(&app, Method::POST, "/sessions", Body::from(png[..png.len() / 2].to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = send(&app, Method::POST, "/sessions", Body::from("hello")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

/// A PNG declaring `w × h` whose pixel data chunk is empty.
fn png_header(w: u32, h: u32) -> Vec<u8> {
    let mut out = b"\x89PNG\r\n\x1a\n".to_vec();
    let mut ihdr = b"IHDR".to_vec();
    ihdr.extend(w.to_be_bytes());
    ihdr.extend(h.to_be_bytes());
    ihdr.extend([8, 2, 0, 0, 0]);
    for chunk in [ihdr, b"IDAT".to_vec()] {
        out.extend((chunk.len() as u32 - 4).to_be_bytes());
        out.extend(&chunk);
        out.extend(crc32fast::hash(&chunk).to_be_bytes());
    }
    out
}

#[tokio::test]
async fn upload_over_pixel_limit_is_413() {
    let app = app();
    let (s, _) = send(&app, Method::POST, "/sessions", Body::from(png_header(10_000, 10_000))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    let small = app_with(ServiceConfig {
        max_pixels: 100,
        ..ServiceConfig::default()
    });
    let (s, _) = send(&small, Method::POST, "/sessions", Body::from(encode(&background(), ImageFormat::Png))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app();
    let (s, _) = post_json(&app, "/sessions/nope/predict", json!({"n_people": 1})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get_json(&app, "/sessions/nope/candidates?box=0").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn requests_before_predict_are_409() {
    let app = app();
    let id = new_session(&app).await;
    let (s, _) = get_json(&app, &format!("/sessions/{id}/candidates?box=0")).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = post_json(&app, &format!("/sessions/{id}/placements"), json!({"box": 0})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = send(&app, Method::GET, &format!("/sessions/{id}/composite.png"), Body::empty()).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn predict_passes_through_multi_person_prediction() {
    let app = app();
    let id = new_session(&app).await;
    let net = net();
    let cfg = SceneConfig {
        input_size: net.config().input_size as u32,
        ..SceneConfig::default()
    };
    let (scene, _) = build_scene(
        &compose_core::imaging::to_float(&background()),
        &[],
        &Palette::coco(0),
        &cfg,
    )
    .unwrap();
    for n in [1usize, 2, 3] {
        let (s, v) = post_json(&app, &format!("/sessions/{id}/predict"), json!({"n_people": n})).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let expected = net.predict_multi(&scene, n).unwrap();
        let boxes = v["boxes"].as_array().unwrap();
        assert_eq!(boxes.len(), n);
        for (b, e) in boxes.iter().zip(&expected) {
            assert_eq!(b["location"]["index"], e.top().location.index);
            assert_eq!(b["size"]["index"], e.top().size.index);
        }
        assert_eq!(provenance(&v).len(), n);
        let (s, heat) = send(&app, Method::GET, &format!("/sessions/{id}/heatmap.png"), Body::empty()).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(image::load_from_memory(&heat).unwrap().width(), background().width());
    }
    let (s, _) = post_json(&app, &format!("/sessions/{id}/predict"), json!({"n_people": 0})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn candidates_match_the_pool_query() {
    let app = app();
    let id = new_session(&app).await;
    let (_, v) = post_json(&app, &format!("/sessions/{id}/predict"), json!({"n_people": 1})).await;
    let (s, c) = get_json(&app, &format!("/sessions/{id}/candidates?box=0")).await;
    assert_eq!(s, StatusCode::OK);
    let list = c["candidates"].as_array().unwrap();
    assert_eq!(list.len(), 9);
    assert_eq!(c["complete"], true);
    assert_eq!(list[0]["segment_id"], v["boxes"][0]["segment_id"]);

    let pool = pool();
    let ex = extractor();
    let [x, y, w, h] = provenance(&v)[0].bbox;
    let b = compose_core::geometry::PixelBox::from_xywh(x, y, w, h).unwrap();
    let (d, size) = pool.describe_query(&background(), &b, &ex).unwrap();
    let expected = pool.candidates_for_descriptor(&d, size, 9).unwrap();
    let ids: Vec<u64> = list.iter().map(|h| h["segment_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, expected.hits.iter().map(|h| h.id).collect::<Vec<_>>());

    let (s, thumb) = send(&app, Method::GET, list[0]["thumbnail_url"].as_str().unwrap(), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(image::load_from_memory(&thumb).unwrap().color().has_alpha());
    let (s, _) = get_json(&app, &format!("/sessions/{id}/candidates?box=5")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn placement_edits() {
    let app = app();
    let id = new_session(&app).await;
    let edits = format!("/sessions/{id}/placements");
    let composite = format!("/sessions/{id}/composite.png");
    post_json(&app, &format!("/sessions/{id}/predict"), json!({"n_people": 1})).await;
    let (_, before) = send(&app, Method::GET, &composite, Body::empty()).await;

    // identity edit leaves the composite byte-identical
    let (s, _) = post_json(&app, &edits, json!({"box": 0, "dx": 0, "dy": 0, "scale": 1})).await;
    assert_eq!(s, StatusCode::OK);
    let (_, after) = send(&app, Method::GET, &composite, Body::empty()).await;
    assert_eq!(before, after);

    // move the box to the middle at 60 px tall so doubling it stays inside the frame
    let (_, v) = get_json(&app, &format!("/sessions/{id}")).await;
    let p = provenance(&v)[0];
    let [x, y, w, h] = p.bbox;
    let (bw, bh) = background().dimensions();
    let (s, v) = post_json(
        &app,
        &edits,
        json!({"box": 0, "dx": f64::from(bw) / 2.0 - (x + w / 2.0), "dy": f64::from(bh) / 2.0 - (y + h / 2.0), "scale": 60.0 / h}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let mid = provenance(&v)[0];
    assert!((mid.bbox[3] - 60.0).abs() < 1e-9);
    let (_, v) = post_json(&app, &edits, json!({"box": 0, "scale": 2.0})).await;
    let doubled = provenance(&v)[0];
    assert!((doubled.bbox[3] - 120.0).abs() < 1e-9);
    assert!((doubled.scale - 2.0 * mid.scale).abs() < 1e-12);

    // replacing the segment keeps the box
    let other = if doubled.segment_id == 1 { 2 } else { 1 };
    let (_, v) = post_json(&app, &edits, json!({"box": 0, "segment_id": other})).await;
    let replaced = provenance(&v)[0];
    assert_eq!(replaced.segment_id, other);
    assert_eq!(replaced.bbox, doubled.bbox);

    // rejected edits
    let (s, _) = post_json(&app, &edits, json!({"box": 0, "segment_id": 9999})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post_json(&app, &edits, json!({"box": 3})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post_json(&app, &edits, json!({"box": 0, "scale": 0.0})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post_json(&app, &edits, json!({"box": 0, "scale": 0.001})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post_json(&app, &edits, json!({"box": 0, "dx": 1e6})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, v) = get_json(&app, &format!("/sessions/{id}")).await;
    assert_eq!(provenance(&v), vec![replaced]);
}

#[tokio::test]
async fn composites_reproduce_offline_from_provenance() {
    let app = app();
    let id = new_session(&app).await;
    post_json(&app, &format!("/sessions/{id}/predict"), json!({"n_people": 2})).await;
    let (_, v) = post_json(&app, &format!("/sessions/{id}/placements"), json!({"box": 1, "dx": -7, "dy": 3})).await;
    let (_, png) = send(&app, Method::GET, &format!("/sessions/{id}/composite.png"), Body::empty()).await;
    let served = image::load_from_memory(&png).unwrap().to_rgb8();
    let (_, state) = get_json(&app, &format!("/sessions/{id}")).await;
    let spec = spec_from_provenance(
        background(),
        &provenance(&v),
        state["feather_radius"].as_f64().unwrap(),
    )
    .unwrap();
    let offline = compose(&spec, &pool()).unwrap();
    assert_eq!(offline.image, served);
}

#[tokio::test]
async fn sessions_are_independent_and_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(ServiceConfig {
        persist: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    assert_ne!(a, b);
    let (ua, ub) = (format!("/sessions/{a}/predict"), format!("/sessions/{b}/predict"));
    let (ra, rb) = tokio::join!(
        post_json(&app, &ua, json!({"n_people": 2})),
        post_json(&app, &ub, json!({"n_people": 1})),
    );
    assert_eq!(provenance(&ra.1).len(), 2);
    assert_eq!(provenance(&rb.1).len(), 1);
    assert_eq!(provenance(&rb.1)[0], provenance(&ra.1)[0]);
    for id in [&a, &b] {
        let d = dir.path().join(id);
        assert!(d.join("background.png").exists());
        assert!(d.join("composite.png").exists());
        let spec: Value = serde_json::from_slice(&std::fs::read(d.join("spec.json")).unwrap()).unwrap();
        assert_eq!(spec["revision"], 1);
    }
}
