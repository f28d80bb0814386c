//! Scripted stand-in for the diagnostic tool service.
//!
//! Scenario file: `{scenario: {tool: canned}}` where `canned` is either
//! `{status?, message?, data?}` or `{cases: [{when: {arg: value}, response}], default?}`.
//! Every response echoes the call's arguments under `data.received_arguments`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Map, Value};
use tokio::sync::oneshot;

use super::invoke::{result_from_response, BoundCall, ToolInvoker};
use super::{ArgMap, ToolError, ToolResult};

pub const MOCK_TOOLS: [&str; 8] = [
    "slow_sql_rca",
    "metric_inspect",
    "io_topk_process",
    "lock_wait_check",
    "index_recommend",
    "mem_analysis",
    "wdr_report",
    "knob_recommend",
];

#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct Canned {
    #[serde(default)]
    pub status: Option<String>,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub data: Option<Value>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct Case {
    #[serde(default)]
    pub when: BTreeMap<String, Value>,
    pub response: Canned,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Scripted {
    Cases {
        cases: Vec<Case>,
        #[serde(default)]
        default: Option<Canned>,
    },
    Single(Canned),
}

pub type ScenarioFile = BTreeMap<String, BTreeMap<String, Scripted>>;

pub fn parse_scenarios(text: &str) -> Result<ScenarioFile, ToolError> {
    serde_json::from_str(text).map_err(|e| ToolError::Config(format!("scenario file: {e}")))
}

fn loosely_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::String(x), Value::String(y)) => x.eq_ignore_ascii_case(y),
        (Value::String(x), other) | (other, Value::String(x)) => match other {
            Value::Number(n) => *x == n.to_string(),
            Value::Bool(v) => *x == v.to_string(),
            Value::Null => x == "null",
            _ => false,
        },
        _ => a == b,
    }
}

/// One scenario's scripted responses, usable in-process or behind HTTP.
#[derive(Debug, Clone, Default)]
pub struct MockToolset {
    scripts: BTreeMap<String, Scripted>,
}

impl MockToolset {
    pub fn new(file: &ScenarioFile, scenario: &str) -> Self {
        if !file.contains_key(scenario) {
            tracing::warn!(scenario, "scenario not in file; every tool answers with empty findings");
        }
        Self { scripts: file.get(scenario).cloned().unwrap_or_default() }
    }

    /// Response body for `tool`, or `None` for a tool the mock does not serve.
    pub fn respond(&self, tool: &str, arguments: &Map<String, Value>) -> Option<Value> {
        if !MOCK_TOOLS.contains(&tool) {
            return None;
        }
        let canned = match self.scripts.get(tool) {
            Some(Scripted::Single(c)) => Some(c.clone()),
            Some(Scripted::Cases { cases, default }) => cases
                .iter()
                .find(|c| c.when.iter().all(|(k, v)| arguments.get(k).is_some_and(|a| loosely_equal(a, v))))
                .map(|c| c.response.clone())
                .or_else(|| default.clone()),
            None => None,
        };
        let canned = canned.unwrap_or(Canned { status: None, message: None, data: None });
        let mut data = match canned.data {
            Some(Value::Object(m)) => m,
            Some(other) => Map::from_iter([("value".to_string(), other)]),
            None => Map::from_iter([("findings".to_string(), json!([]))]),
        };
        data.insert("received_arguments".into(), Value::Object(arguments.clone()));
        Some(json!({
            "status": canned.status.unwrap_or_else(|| "ok".into()),
            "data": data,
            "message": canned.message.unwrap_or_default(),
        }))
    }
}

/// Invoker that answers from a `MockToolset` without a network hop.
#[derive(Debug, Clone)]
pub struct InProcessInvoker {
    pub toolset: MockToolset,
}

impl ToolInvoker for InProcessInvoker {
    fn invoke(&self, call: &BoundCall) -> ToolResult {
        let args: Map<String, Value> = call.call().arguments.clone().into_iter().collect();
        match self.toolset.respond(&call.call().tool_name, &args) {
            Some(body) => result_from_response(&call.call().tool_name, &body),
            None => ToolResult::failure(&call.call().tool_name, "HTTP 404: tool not served"),
        }
    }
}

#[derive(Debug, Deserialize)]
struct InvokeBody {
    #[serde(default)]
    arguments: ArgMap,
}

async fn invoke_tool(
    State(toolset): State<Arc<MockToolset>>,
    Path(name): Path<String>,
    body: Result<Json<InvokeBody>, axum::extract::rejection::JsonRejection>,
) -> (StatusCode, Json<Value>) {
    let Ok(Json(body)) = body else {
        return (StatusCode::BAD_REQUEST, Json(json!({"status": "error", "data": null, "message": "body must be {\"arguments\": {...}}"})));
    };
    let args: Map<String, Value> = body.arguments.into_iter().collect();
    match toolset.respond(&name, &args) {
        Some(resp) => (StatusCode::OK, Json(resp)),
        None => (StatusCode::NOT_FOUND, Json(json!({"status": "error", "data": null, "message": format!("tool {name} is not served")}))),
    }
}

pub fn router(toolset: MockToolset) -> Router {
    Router::new()
        .route("/tools/{name}", post(invoke_tool))
        .route("/health", get(|| async { Json(json!({"ok": true})) }))
        .with_state(Arc::new(toolset))
}

/// Running mock server; shuts down when dropped.
#[derive(Debug)]
pub struct MockServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServerHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Serve `scenario` from `file` on `addr` (port 0 picks a free port) on a
/// dedicated thread with its own runtime.
pub fn run_mock_server(file: &ScenarioFile, scenario: &str, addr: SocketAddr) -> std::io::Result<MockServerHandle> {
    let app = router(MockToolset::new(file, scenario));
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let thread = std::thread::Builder::new().name("mock-tools".into()).spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    tracing::error!(error = %e, "mock server listener");
                    return;
                }
            };
            let server = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = server.await {
                tracing::error!(error = %e, "mock server stopped");
            }
        });
    })?;
    Ok(MockServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}
