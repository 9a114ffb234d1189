//! HTTP binding of the session manager under `/api/v1`.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use super::{SessionManager, SessionRequest, StrokePayload};
use crate::error::{invalid, Error};

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::ServiceUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            Error::Contract(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError(invalid(format!("malformed JSON body: {e}"))))
}

/// Serialize with serde_json directly so identical results give identical bytes.
fn json_body<T: Serialize>(status: StatusCode, value: &T) -> Response {
    let bytes = serde_json::to_vec(value).expect("response serializes");
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

type AppState = Arc<SessionManager>;

async fn healthz(State(m): State<AppState>) -> Response {
    match m.engine() {
        Ok(engine) => json_body(
            StatusCode::OK,
            &json!({
                "status": "ok",
                "stage1_hash": engine.stage1().content_hash(),
                "stage2_hash": engine.stage2().content_hash(),
                "gallery_size": engine.gallery().len(),
                "sessions": m.len(),
            }),
        ),
        Err(e) => json_body(StatusCode::SERVICE_UNAVAILABLE, &json!({ "status": "unavailable", "error": e.to_string() })),
    }
}

async fn create_session(State(m): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let request: SessionRequest = parse_body(&body)?;
    let summary = m.create(&request)?;
    Ok(json_body(
        StatusCode::CREATED,
        &json!({ "session_id": summary.session_id, "canvas_size": summary.canvas_size, "k": summary.k }),
    ))
}

async fn get_session(State(m): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(json_body(StatusCode::OK, &m.get(&id)?))
}

async fn delete_session(State(m): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    m.close(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn add_stroke(State(m): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let payload: StrokePayload = parse_body(&body)?;
    let result = tokio::task::spawn_blocking(move || m.add_stroke(&id, &payload))
        .await
        .map_err(|e| ApiError(Error::ServiceUnavailable(format!("stroke worker failed: {e}"))))??;
    Ok(json_body(StatusCode::OK, &result))
}

async fn list_photos(State(m): State<AppState>) -> ApiResult<Response> {
    let ids: Vec<&str> = m.engine()?.photo_ids().collect();
    Ok(json_body(StatusCode::OK, &json!({ "photo_ids": ids })))
}

async fn get_photo(State(m): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let photo = m
        .engine()?
        .photo(&id)
        .ok_or_else(|| Error::NotFound(format!("no photo {id:?}")))?;
    let png = photo.to_png_bytes()?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/strokes", post(add_stroke))
        .route("/gallery/photos", get(list_photos))
        .route("/gallery/photos/{photo_id}", get(get_photo));
    Router::new().nest("/api/v1", api).with_state(manager)
}

/// Serve on `listener` until `shutdown` resolves, reaping idle sessions in
/// the background.
pub async fn serve(
    manager: Arc<SessionManager>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> crate::Result<()> {
    let reaper = {
        let m = manager.clone();
        let period = (m.ttl() / 4).max(Duration::from_secs(1));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let closed = m.reap_expired();
                if closed > 0 {
                    log::info!("reaped {closed} idle sessions");
                }
            }
        })
    };
    let result = axum::serve(listener, router(manager))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| Error::ServiceUnavailable(format!("server error: {e}")));
    reaper.abort();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::service::tests::manager;
    use crate::service::{ServeConfig, StrokePoint};
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    async fn call(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    fn value(bytes: &[u8]) -> serde_json::Value {
        serde_json::from_slice(bytes).unwrap()
    }

    #[tokio::test]
    async fn endpoints() {
        let app = router(Arc::new(manager()));
        let (s, b) = call(&app, "GET", "/api/v1/healthz", "").await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(value(&b)["gallery_size"], 4);

        let (s, b) = call(&app, "POST", "/api/v1/sessions", "").await;
        assert_eq!(s, StatusCode::CREATED);
        let id = value(&b)["session_id"].as_str().unwrap().to_string();

        let stroke = serde_json::to_string(&StrokePayload::polyline(
            vec![StrokePoint { x: 3.0, y: 3.0, pressure: None }, StrokePoint { x: 20.0, y: 25.0, pressure: None }],
            2.0,
        ))
        .unwrap();
        let (s, b) = call(&app, "POST", &format!("/api/v1/sessions/{id}/strokes"), &stroke).await;
        assert_eq!(s, StatusCode::OK);
        let v = value(&b);
        assert_eq!(v["stroke_index"], 1);
        assert_eq!(v["top_k"].as_array().unwrap().len(), 3);
        assert!(v.get("target_rank").is_none());

        let (s, b) = call(&app, "GET", &format!("/api/v1/sessions/{id}"), "").await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(value(&b)["stroke_count"], 1);

        let (s, _) = call(&app, "POST", &format!("/api/v1/sessions/{id}/strokes"), "{\"points\": 3}").await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        let (s, _) = call(&app, "POST", &format!("/api/v1/sessions/{id}/strokes"), "{}").await;
        assert_eq!(s, StatusCode::BAD_REQUEST);

        let (s, _) = call(&app, "DELETE", &format!("/api/v1/sessions/{id}"), "").await;
        assert_eq!(s, StatusCode::NO_CONTENT);
        let (s, _) = call(&app, "DELETE", &format!("/api/v1/sessions/{id}"), "").await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, _) = call(&app, "GET", &format!("/api/v1/sessions/{id}"), "").await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, _) = call(&app, "POST", "/api/v1/sessions/nope/strokes", &stroke).await;
        assert_eq!(s, StatusCode::NOT_FOUND);

        let (s, _) = call(&app, "POST", "/api/v1/sessions", r#"{"target_id": "missing"}"#).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, _) = call(&app, "POST", "/api/v1/sessions", r#"{"colour": 1}"#).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);

        let (s, b) = call(&app, "GET", "/api/v1/gallery/photos", "").await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(value(&b)["photo_ids"].as_array().unwrap().len(), 4);
        let (s, b) = call(&app, "GET", "/api/v1/gallery/photos/id0001", "").await;
        assert_eq!(s, StatusCode::OK);
        assert!(crate::raster::PhotoImage::from_png_bytes(&b).is_ok());
        let (s, _) = call(&app, "GET", "/api/v1/gallery/photos/zzz", "").await;
        assert_eq!(s, StatusCode::NOT_FOUND);
    }

    #[tokio::test]
    async fn unloaded_service_reports_unavailable() {
        let app = router(Arc::new(SessionManager::new(None, &ServeConfig::default())));
        let (s, _) = call(&app, "GET", "/api/v1/healthz", "").await;
        assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
        let (s, _) = call(&app, "POST", "/api/v1/sessions", "{}").await;
        assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    }
}
