//! HTTP routes of the studio API.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use flim_core::flim::EncoderSpec;
use flim_core::markers::Modality;
use flim_core::msflim::Pick;
use flim_core::volume::Axis;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tower_http::services::ServeDir;

use crate::error::{ApiError, ApiResult};
use crate::image::slice_png;
use crate::state::Studio;

type AppState = Arc<Studio>;

/// The API router, optionally serving a built client bundle at `/`.
pub fn router(studio: Arc<Studio>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{id}/slice", get(image_slice))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{sid}", get(get_session))
        .route("/api/sessions/{sid}/markers", put(put_markers))
        .route("/api/sessions/{sid}/runs", post(launch_run))
        .route("/api/sessions/{sid}/bank", post(set_bank))
        .route("/api/sessions/{sid}/encoder", post(build_encoder))
        .route("/api/sessions/{sid}/export", get(export))
        .route("/api/runs/{rid}", get(get_run))
        .route("/api/runs/{rid}/candidates/{k}/activation", get(activation))
        .with_state(studio);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Parses a JSON body; malformed input is a 400.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    let slice: &[u8] = if bytes.iter().all(|b| b.is_ascii_whitespace()) { b"{}" } else { bytes };
    serde_json::from_slice(slice).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

fn parse<T: std::str::FromStr<Err = flim_core::Error>>(s: &str) -> ApiResult<T> {
    s.parse().map_err(|e: flim_core::Error| ApiError::BadRequest(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Core(flim_core::Error::InvalidArgument(format!("worker task failed: {e}"))))?
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Deserialize)]
struct DatasetQuery {
    #[serde(default)]
    dataset: String,
}

async fn list_images(State(st): State<AppState>, Query(q): Query<DatasetQuery>) -> ApiResult<Response> {
    Ok(Json(st.list_images(&q.dataset)?).into_response())
}

#[derive(Deserialize)]
struct SliceQuery {
    axis: String,
    index: usize,
    #[serde(default)]
    channel: usize,
    modality: String,
    #[serde(default)]
    dataset: String,
}

async fn image_slice(State(st): State<AppState>, Path(id): Path<String>, Query(q): Query<SliceQuery>) -> ApiResult<Response> {
    let axis: Axis = parse(&q.axis)?;
    let modality: Modality = parse(&q.modality)?;
    let v = st.image(&q.dataset, &id, modality)?;
    let grid = v.slice2d(axis, q.index, q.channel).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    Ok(png(slice_png(&grid)))
}

#[derive(Deserialize)]
struct NewSession {
    #[serde(default)]
    dataset: String,
    target_bank: Option<usize>,
}

async fn create_session(State(st): State<AppState>, raw: Bytes) -> ApiResult<Response> {
    let req: NewSession = body(&raw)?;
    let view = st.create_session(&req.dataset, req.target_bank)?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(st): State<AppState>, Path(sid): Path<String>) -> ApiResult<Response> {
    Ok(Json(st.session_view(&sid)?).into_response())
}

async fn put_markers(State(st): State<AppState>, Path(sid): Path<String>, raw: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&raw).map_err(|_| ApiError::BadRequest("marker file is not UTF-8".into()))?;
    Ok(Json(st.put_markers(&sid, text)?).into_response())
}

#[derive(Deserialize)]
struct NewRun {
    n1: usize,
    n2: usize,
    #[serde(default)]
    seed: u64,
    modality: Option<String>,
}

async fn launch_run(State(st): State<AppState>, Path(sid): Path<String>, raw: Bytes) -> ApiResult<Response> {
    let req: NewRun = body(&raw)?;
    let modality = req.modality.as_deref().map(parse::<Modality>).transpose()?;
    let view = st.launch_run(&sid, req.n1, req.n2, req.seed, modality)?;
    Ok((StatusCode::ACCEPTED, Json(view)).into_response())
}

async fn get_run(State(st): State<AppState>, Path(rid): Path<String>) -> ApiResult<Response> {
    Ok(Json(st.run_view(&rid)?).into_response())
}

#[derive(Deserialize)]
struct ActivationQuery {
    image: String,
    axis: String,
    index: usize,
}

async fn activation(
    State(st): State<AppState>,
    Path((rid, k)): Path<(String, usize)>,
    Query(q): Query<ActivationQuery>,
) -> ApiResult<Response> {
    let axis: Axis = parse(&q.axis)?;
    let act = blocking(move || st.activation(&rid, &q.image, k)).await?;
    let grid = act.slice2d(axis, q.index, 0).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    Ok(png(slice_png(&grid)))
}

#[derive(Deserialize)]
struct PickBody {
    run: String,
    image: String,
    index: usize,
}

#[derive(Deserialize)]
struct BankRequest {
    picks: Vec<PickBody>,
}

async fn set_bank(State(st): State<AppState>, Path(sid): Path<String>, raw: Bytes) -> ApiResult<Response> {
    let req: BankRequest = body(&raw)?;
    let picks = req
        .picks
        .into_iter()
        .map(|p| Pick {
            run_id: p.run,
            image_id: p.image,
            candidate: p.index,
        })
        .collect();
    Ok(Json(blocking(move || st.set_bank(&sid, picks)).await?).into_response())
}

#[derive(Deserialize)]
struct EncoderRequest {
    spec: Option<EncoderSpec>,
    #[serde(default)]
    seed: u64,
}

async fn build_encoder(State(st): State<AppState>, Path(sid): Path<String>, raw: Bytes) -> ApiResult<Response> {
    let req: EncoderRequest = body(&raw)?;
    Ok(Json(blocking(move || st.build_encoder(&sid, req.spec, req.seed)).await?).into_response())
}

async fn export(State(st): State<AppState>, Path(sid): Path<String>) -> ApiResult<Response> {
    let bytes = st.export(&sid)?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{sid}_bank.fb\"")),
        ],
        bytes,
    )
        .into_response())
}
