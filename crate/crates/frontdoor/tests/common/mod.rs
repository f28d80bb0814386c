#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dbcopilot::llm_backend::LlmBackend;
use dbcopilot_frontdoor::api::{router, AppState};
use dbcopilot_frontdoor::config::CopilotConfig;
use dbcopilot_frontdoor::sessions::SessionStore;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn state_with(scenario: &str, llm: Arc<dyn LlmBackend>) -> Arc<AppState> {
    let cfg = CopilotConfig { mock_scenario: scenario.into(), ..CopilotConfig::default() };
    Arc::new(AppState::new(cfg.pipeline(llm.clone()).unwrap(), cfg.engine(None, llm).unwrap(), SessionStore::default()))
}

pub fn state(scenario: &str) -> Arc<AppState> {
    state_with(scenario, Arc::new(dbcopilot::bundled::scripted_llm()))
}

pub fn app(state: &Arc<AppState>) -> Router {
    router(state.clone())
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("not JSON ({e}): {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn text(&self) -> String {
        String::from_utf8(self.body.clone()).unwrap()
    }
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

pub async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    send(app, "POST", uri, Some(&body.to_string())).await
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    send(app, "GET", uri, None).await
}

/// Poll until the session leaves `active`.
pub async fn settle(app: &Router, session_id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let r = get(app, &format!("/api/diagnose/{session_id}")).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        let v = r.json();
        if v["state"] != "active" {
            return v;
        }
        assert!(Instant::now() < deadline, "session {session_id} stuck active");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

pub async fn start_diagnosis(app: &Router, alert: &str) -> String {
    let r = post(app, "/api/diagnose", serde_json::json!({ "alert": alert })).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let v = r.json();
    assert_eq!(v.as_object().unwrap().len(), 1);
    v["session_id"].as_str().unwrap().to_string()
}
