//! HTTP inference API.
//!
//! | method | path              | body                                         |
//! |--------|-------------------|----------------------------------------------|
//! | POST   | `/api/predict`    | multipart `image`, or JSON `image_b64`+`format` |
//! | POST   | `/api/preprocess` | same as predict                              |
//! | GET    | `/api/health`     |                                              |
//! | GET    | `/api/models`     |                                              |
//!
//! Errors are `{"code": ..., "message": ...}` with status 400, or 413 when the
//! body exceeds the configured cap.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use cxr_core::bundle::ModelBundle;
use cxr_core::imaging::{self, encode_pgm, ImageFormat, ImagingError, Segment};
use cxr_core::pipeline::{predict_pipeline_as, sniff_format, PipelineError};
use cxr_core::Abnormality;

pub const DEFAULT_MAX_BODY_BYTES: usize = 10 * 1024 * 1024;

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    pub max_body_bytes: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }
}

impl From<ImagingError> for ApiError {
    fn from(e: ImagingError) -> Self {
        ApiError::bad_request(e.code(), e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::Image(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

fn too_large(message: String) -> ApiError {
    ApiError {
        status: StatusCode::PAYLOAD_TOO_LARGE,
        code: "PayloadTooLarge",
        message,
    }
}

#[derive(Deserialize)]
struct JsonImage {
    image_b64: String,
    format: Option<String>,
}

/// Image bytes plus an explicitly requested format, if any.
struct Upload {
    bytes: Vec<u8>,
    format: Option<ImageFormat>,
}

impl Upload {
    fn format(&self) -> Result<ImageFormat, ImagingError> {
        match self.format {
            Some(f) => Ok(f),
            None => sniff_format(&self.bytes),
        }
    }
}

async fn read_upload(req: Request) -> Result<Upload, ApiError> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if content_type.starts_with("multipart/form-data") {
        let mut multipart = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request("BadRequest", e.body_text()))?;
        let mut upload = None;
        let mut format = None;
        while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
            match field.name() {
                Some("image") => upload = Some(field.bytes().await.map_err(multipart_error)?.to_vec()),
                Some("format") => format = Some(field.text().await.map_err(multipart_error)?.parse()?),
                _ => {}
            }
        }
        let bytes = upload.ok_or_else(|| ApiError::bad_request("BadRequest", "multipart field \"image\" is missing"))?;
        return Ok(Upload { bytes, format });
    }
    let body = Bytes::from_request(req, &()).await.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            too_large(e.body_text())
        } else {
            ApiError::bad_request("BadRequest", e.body_text())
        }
    })?;
    if content_type.starts_with("application/json") {
        let parsed: JsonImage =
            serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("BadRequest", e.to_string()))?;
        let bytes = B64
            .decode(parsed.image_b64.trim())
            .map_err(|e| ApiError::bad_request("MalformedImage", format!("image_b64: {e}")))?;
        let format = parsed.format.as_deref().map(str::parse).transpose()?;
        return Ok(Upload { bytes, format });
    }
    // Raw image body.
    Ok(Upload {
        bytes: body.to_vec(),
        format: None,
    })
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        too_large(e.body_text())
    } else {
        ApiError::bad_request("BadRequest", e.body_text())
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "InternalError",
        message: e.to_string(),
    })
}

async fn predict(State(bundle): State<Arc<ModelBundle>>, req: Request) -> Result<Response, ApiError> {
    let upload = read_upload(req).await?;
    let format = upload.format()?;
    let response = blocking(move || predict_pipeline_as(&bundle, &upload.bytes, format)).await??;
    Ok(Json(response).into_response())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PreprocessResponse {
    pub full: String,
    pub seg1: String,
    pub seg2: String,
    pub seg3: String,
}

async fn preprocess(req: Request) -> Result<Json<PreprocessResponse>, ApiError> {
    let upload = read_upload(req).await?;
    let format = upload.format()?;
    let out = blocking(move || imaging::preprocess(&upload.bytes, format)).await??;
    let pgm = |seg: Option<Segment>| {
        let img = seg.map_or(&out.full, |s| out.segment(s));
        B64.encode(encode_pgm(img))
    };
    Ok(Json(PreprocessResponse {
        full: pgm(None),
        seg1: pgm(Some(Segment::I)),
        seg2: pgm(Some(Segment::II)),
        seg3: pgm(Some(Segment::III)),
    }))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub abnormality: Abnormality,
    pub segment: Segment,
    pub threshold: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

async fn models(State(bundle): State<Arc<ModelBundle>>) -> Json<Vec<ModelInfo>> {
    Json(
        bundle
            .models()
            .iter()
            .map(|m| ModelInfo {
                abnormality: m.abnormality,
                segment: m.segment(),
                threshold: m.threshold,
                train_accuracy: m.train_accuracy,
                test_accuracy: m.test_accuracy,
            })
            .collect(),
    )
}

pub fn router(bundle: Arc<ModelBundle>, config: ServerConfig) -> Router {
    Router::new()
        .route("/api/predict", post(predict))
        .route("/api/preprocess", post(preprocess))
        .route("/api/health", get(health))
        .route("/api/models", get(models))
        .layer(DefaultBodyLimit::max(config.max_body_bytes))
        .with_state(bundle)
}

/// Serves until ctrl-c.
pub async fn serve(bundle: ModelBundle, addr: SocketAddr, config: ServerConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(bundle), config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
