//! Stateless HTTP facade over the command handlers.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use tower_http::services::ServeDir;

use crate::api::{self, ApiError, Command, Resolver, RunRequest};

fn json(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn status(e: &ApiError) -> StatusCode {
    match e {
        ApiError::Validation(_) => StatusCode::BAD_REQUEST,
        ApiError::Infeasible(_) => StatusCode::UNPROCESSABLE_ENTITY,
        ApiError::Io(_) => StatusCode::NOT_FOUND,
    }
}

async fn handle(cmd: Command, resolver: Arc<Resolver>, body: String) -> Response {
    let out = tokio::task::spawn_blocking(move || RunRequest::from_json(&body).and_then(|req| api::run(cmd, &req, &resolver))).await;
    match out {
        Ok(Ok(o)) => json(StatusCode::OK, o.json),
        Ok(Err(e)) => json(status(&e), api::error_json(&e)),
        Err(e) => json(StatusCode::INTERNAL_SERVER_ERROR, api::error_json(&ApiError::Io(e.to_string()))),
    }
}

/// Routes under `/api`, plus static files from `assets` when given.
pub fn router(resolver: Resolver, assets: Option<PathBuf>) -> Router {
    let mut app = Router::new().route("/api/catalogs", get(|State(r): State<Arc<Resolver>>| async move { json(StatusCode::OK, api::catalogs_json(&r)) }));
    for cmd in Command::ALL {
        app = app.route(&format!("/api/{}", cmd.name()), post(move |State(r): State<Arc<Resolver>>, body: String| handle(cmd, r, body)));
    }
    let app = app.with_state(Arc::new(resolver));
    match assets {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

pub async fn serve(resolver: Resolver, port: u16, assets: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(resolver, assets)).await
}
