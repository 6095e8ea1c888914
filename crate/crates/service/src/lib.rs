//! REST facade over prediction, retrieval and compositing.
//!
//! | method | path | body | result |
//! |---|---|---|---|
//! | POST | `/sessions` | PNG or JPEG bytes | `201` session id and image size |
//! | GET | `/sessions/{id}` | | session state |
//! | POST | `/sessions/{id}/predict` | `{"n_people": n}` | boxes, heatmap and composite URLs |
//! | GET | `/sessions/{id}/candidates?box=i` | | up to 9 candidate segments |
//! | POST | `/sessions/{id}/placements` | `{"box", "segment_id", "dx", "dy", "scale"}` | updated composite |
//! | GET | `/sessions/{id}/background.png`, `composite.png`, `heatmap.png` | | PNG |
//! | GET | `/segments/{id}/thumbnail.png` | | RGBA PNG cutout |

mod error;
mod session;

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use compose_core::compositor::{ProvenanceEntry, SegmentSource};
use compose_core::geometry::GridCell;
use compose_core::net::PlacementNet;
use compose_core::retrieval::{CandidatePool, FeatureExtractor};
use compose_core::workflow::Composer;
use image::{ImageFormat, ImageReader, RgbaImage};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as AsyncMutex;

pub use error::{ApiError, ApiResult};
pub use session::PlacementEdit;
use session::Session;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Largest accepted background, in pixels.
    pub max_pixels: u64,
    /// Largest accepted request body, in bytes.
    pub max_upload_bytes: usize,
    pub feather_radius: f64,
    /// Directory receiving one folder per session; sessions live only in memory when unset.
    pub persist: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_pixels: 20_000_000,
            max_upload_bytes: 64 << 20,
            feather_radius: compose_core::compositor::DEFAULT_FEATHER_RADIUS,
            persist: None,
        }
    }
}

pub struct AppState {
    net: PlacementNet,
    pool: CandidatePool,
    extractor: Box<dyn FeatureExtractor>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<AsyncMutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(
        net: PlacementNet,
        pool: CandidatePool,
        extractor: Box<dyn FeatureExtractor>,
        config: ServiceConfig,
    ) -> Self {
        AppState {
            net,
            pool,
            extractor,
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    fn composer(&self) -> Composer<'_> {
        let mut c = Composer::new(&self.net, &self.pool, self.extractor.as_ref());
        c.feather_radius = self.config.feather_radius;
        c
    }

    fn session(&self, id: &str) -> ApiResult<Arc<AsyncMutex<Session>>> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
    }

    fn persist(&self, s: &Session) {
        let Some(root) = &self.config.persist else {
            return;
        };
        let dir = root.join(&s.id);
        let result = (|| -> std::io::Result<()> {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("background.png"), &s.background_png)?;
            let spec = serde_json::json!({
                "revision": s.revision,
                "feather_radius": s.spec.feather_radius,
                "provenance": s.provenance,
            });
            std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&spec)?)?;
            if let Some(c) = &s.composite_png {
                std::fs::write(dir.join("composite.png"), c)?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            log::warn!("could not persist session {} to {}: {e}", s.id, dir.display());
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_state))
        .route("/sessions/{id}/predict", post(predict))
        .route("/sessions/{id}/candidates", get(candidates))
        .route("/sessions/{id}/placements", post(edit_placement))
        .route("/sessions/{id}/background.png", get(background_png))
        .route("/sessions/{id}/composite.png", get(composite_png))
        .route("/sessions/{id}/heatmap.png", get(heatmap_png))
        .route("/segments/{id}/thumbnail.png", get(thumbnail_png))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Runs `f` on the session under its lock, off the async runtime.
async fn with_session<T: Send + 'static>(
    state: &Arc<AppState>,
    id: &str,
    f: impl FnOnce(&AppState, &mut Session) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let session = state.session(id)?;
    let mut guard = session.lock_owned().await;
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state, &mut guard))
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

fn png_response(data: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], data).into_response()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub background_url: String,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let reader = ImageReader::new(Cursor::new(body.clone()))
        .with_guessed_format()
        .map_err(|e| ApiError::BadRequest(format!("unreadable upload: {e}")))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        _ => return Err(ApiError::BadRequest("upload must be a PNG or JPEG image".into())),
    }
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| ApiError::BadRequest(format!("undecodable image: {e}")))?;
    let pixels = u64::from(w) * u64::from(h);
    if pixels > state.config.max_pixels {
        return Err(ApiError::TooLarge(format!(
            "image has {pixels} pixels, the limit is {}",
            state.config.max_pixels
        )));
    }
    let id = format!("{:08x}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let worker = state.clone();
    let session_id = id.clone();
    let session = tokio::task::spawn_blocking(move || {
        let image = image::load_from_memory(&body)
            .map_err(|e| ApiError::BadRequest(format!("undecodable image: {e}")))?
            .to_rgb8();
        let s = Session::new(session_id, image, worker.config.feather_radius)?;
        worker.persist(&s);
        Ok::<_, ApiError>(s)
    })
    .await
    .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))??;
    let (width, height) = session.dimensions();
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id.clone(), Arc::new(AsyncMutex::new(session)));
    log::info!("created session {id} ({width}x{height})");
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            background_url: format!("/sessions/{id}/background.png"),
            id,
            width,
            height,
        }),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub revision: u64,
    pub predicted: bool,
    pub provenance: Vec<ProvenanceEntry>,
    pub feather_radius: f64,
}

fn view(s: &Session) -> SessionView {
    let (width, height) = s.dimensions();
    SessionView {
        id: s.id.clone(),
        width,
        height,
        revision: s.revision,
        predicted: s.prediction.is_some(),
        provenance: s.provenance.clone(),
        feather_radius: s.spec.feather_radius,
    }
}

async fn session_state(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionView>> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    Ok(Json(view(&s)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictRequest {
    pub n_people: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxView {
    pub index: usize,
    /// `[x, y, w, h]` in background pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub location: GridCell,
    pub size: GridCell,
    pub location_prob: f64,
    pub size_prob: f64,
    pub segment_id: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictResponse {
    pub revision: u64,
    pub boxes: Vec<BoxView>,
    pub heatmap_url: String,
    pub composite_url: String,
    pub provenance: Vec<ProvenanceEntry>,
}

async fn predict(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<PredictRequest>,
) -> ApiResult<Json<PredictResponse>> {
    let response = with_session(&state, &id, move |st, s| {
        s.predict(&st.composer(), req.n_people)?;
        st.persist(s);
        let people = &s.prediction.as_ref().expect("just predicted").people;
        let boxes = people
            .iter()
            .zip(&s.spec.placements)
            .enumerate()
            .map(|(index, (p, placement))| {
                let top = p.prediction.top();
                BoxView {
                    index,
                    bbox: placement.bbox.to_xywh(),
                    location: top.location,
                    size: top.size,
                    location_prob: top.location_prob,
                    size_prob: top.size_prob,
                    segment_id: placement.segment_id,
                }
            })
            .collect();
        Ok(PredictResponse {
            revision: s.revision,
            boxes,
            heatmap_url: format!("/sessions/{}/heatmap.png?rev={}", s.id, s.revision),
            composite_url: format!("/sessions/{}/composite.png?rev={}", s.id, s.revision),
            provenance: s.provenance.clone(),
        })
    })
    .await?;
    Ok(Json(response))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidatesQuery {
    #[serde(rename = "box")]
    pub box_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateView {
    pub segment_id: u64,
    pub distance: f64,
    pub thumbnail_url: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidatesResponse {
    #[serde(rename = "box")]
    pub box_index: usize,
    pub candidates: Vec<CandidateView>,
    /// Trailing candidates that did not pass the size filter.
    pub padded: usize,
    pub complete: bool,
}

async fn candidates(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<CandidatesQuery>,
) -> ApiResult<Json<CandidatesResponse>> {
    let c = with_session(&state, &id, move |st, s| s.candidates(&st.composer(), q.box_index)).await?;
    Ok(Json(CandidatesResponse {
        box_index: q.box_index,
        candidates: c
            .hits
            .iter()
            .map(|h| CandidateView {
                segment_id: h.id,
                distance: h.distance,
                thumbnail_url: format!("/segments/{}/thumbnail.png", h.id),
            })
            .collect(),
        padded: c.padded,
        complete: c.complete,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResponse {
    pub revision: u64,
    pub composite_url: String,
    pub provenance: Vec<ProvenanceEntry>,
}

async fn edit_placement(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(edit): Json<PlacementEdit>,
) -> ApiResult<Json<EditResponse>> {
    let response = with_session(&state, &id, move |st, s| {
        s.apply(&st.composer(), &edit)?;
        st.persist(s);
        Ok(EditResponse {
            revision: s.revision,
            composite_url: format!("/sessions/{}/composite.png?rev={}", s.id, s.revision),
            provenance: s.provenance.clone(),
        })
    })
    .await?;
    Ok(Json(response))
}

async fn background_png(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    Ok(png_response(s.background_png.clone()))
}

async fn composite_png(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    Ok(png_response(s.composite_png()?.to_vec()))
}

async fn heatmap_png(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    Ok(png_response(s.heatmap_png()?.to_vec()))
}

async fn thumbnail_png(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> ApiResult<Response> {
    let seg = state.pool.segment(id)?;
    let (w, h) = seg.image.dimensions();
    let rgba = RgbaImage::from_fn(w, h, |x, y| {
        let [r, g, b] = seg.image.get_pixel(x, y).0;
        let a = if seg.mask[(y * w + x) as usize] { 255 } else { 0 };
        image::Rgba([r, g, b, a])
    });
    let mut buf = Cursor::new(Vec::new());
    rgba.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| ApiError::Internal(format!("PNG encoding failed: {e}")))?;
    Ok(png_response(buf.into_inner()))
}
