//! HTTP routes.
//!
//! | route | body |
//! |---|---|
//! | `POST /sessions` | `labeler`, `part`, optional `session` |
//! | `GET /sessions/{id}` | session view |
//! | `GET /sessions/{id}/query.png` | masked probe image |
//! | `GET /sessions/{id}/gallery/{k}.png` | gallery image at position `k` |
//! | `POST /sessions/{id}/trials` | `choice` (a gallery position) |
//! | `GET /parts` | part list |
//! | `GET /parts/{id}/score` | part score |
//! | `GET /export` | CSV of all part scores |
//!
//! Gallery images are addressed by position only, so nothing a labeler
//! receives names the matching identity before the session closes.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use reid_core::annotation::SessionState;

use crate::body::Body;
use crate::error::ServiceError;
use crate::service::{Service, SessionView, TrialReply};

const TEXT: &str = "text/plain; charset=utf-8";

type Shared = State<Arc<Service>>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/query.png", get(query_png))
        .route("/sessions/{id}/gallery/{file}", get(gallery_png))
        .route("/sessions/{id}/trials", post(post_trial))
        .route("/parts", get(list_parts))
        .route("/parts/{id}/score", get(part_score))
        .route("/export", get(export))
        .with_state(service)
}

/// Serves until the process is stopped.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(service)).await
}

fn text(status: StatusCode, body: Body) -> Response {
    (status, [(header::CONTENT_TYPE, TEXT)], body.render()).into_response()
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn state_name(s: SessionState) -> &'static str {
    match s {
        SessionState::Open => "open",
        SessionState::Closed => "closed",
    }
}

fn session_body(v: &SessionView) -> Body {
    let mut b = Body::new();
    b.push("session", &v.id)
        .push("labeler", &v.labeler)
        .push("part", &v.part)
        .push("state", state_name(v.state))
        .push("trials", v.picks.len())
        .push(
            "picks",
            v.picks.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","),
        )
        .push("query", format!("/sessions/{}/query.png", v.id))
        .push("gallery_size", v.sample_size);
    for k in 0..v.sample_size {
        b.push(format!("gallery.{k}"), format!("/sessions/{}/gallery/{k}.png", v.id));
    }
    if let Some(t) = v.target {
        b.push("target", t);
    }
    b
}

fn trial_body(r: &TrialReply) -> Body {
    let mut b = Body::new();
    b.push("correct", r.correct)
        .push("trials", r.trials)
        .push("state", state_name(r.state));
    b
}

async fn create_session(State(svc): Shared, body: String) -> Result<Response, ServiceError> {
    let req = Body::parse(&body)?;
    let view = svc.create_session(req.require("labeler")?, req.require("part")?, req.get("session"))?;
    Ok(text(StatusCode::CREATED, session_body(&view)))
}

async fn get_session(State(svc): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(text(StatusCode::OK, session_body(&svc.session(&id)?)))
}

async fn query_png(State(svc): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(png(svc.query_png(&id)?))
}

async fn gallery_png(State(svc): Shared, Path((id, file)): Path<(String, String)>) -> Result<Response, ServiceError> {
    let k = file
        .strip_suffix(".png")
        .and_then(|k| k.parse().ok())
        .ok_or_else(|| ServiceError::NotFound(format!("gallery image {file}")))?;
    Ok(png(svc.gallery_png(&id, k)?))
}

async fn post_trial(State(svc): Shared, Path(id): Path<String>, body: String) -> Result<Response, ServiceError> {
    let req = Body::parse(&body)?;
    let raw = req.require("choice")?;
    let choice = raw
        .parse()
        .map_err(|_| ServiceError::BadRequest(format!("choice must be a gallery position, got {raw:?}")))?;
    Ok(text(StatusCode::OK, trial_body(&svc.record_trial(&id, choice)?)))
}

async fn list_parts(State(svc): Shared) -> Response {
    let mut b = Body::new();
    let parts: Vec<_> = svc.catalog().parts().collect();
    b.push("count", parts.len());
    for (i, p) in parts.iter().enumerate() {
        b.push(format!("part.{i}"), &p.part_id);
    }
    text(StatusCode::OK, b)
}

async fn part_score(State(svc): Shared, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let s = svc.part_score(&id)?;
    let mut b = Body::new();
    b.push("part", &s.part_id)
        .push("image", &s.image_id)
        .push("score", s.score)
        .push("labelers", s.labeler_count);
    Ok(text(StatusCode::OK, b))
}

async fn export(State(svc): Shared) -> Result<Response, ServiceError> {
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], svc.export_csv()?).into_response())
}
