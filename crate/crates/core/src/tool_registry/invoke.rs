use std::time::Duration;

use serde_json::{json, Value};

use super::normalize::normalize_result;
use super::{ToolCall, ToolResult, ToolStatus};

/// A call whose arguments have been checked against the descriptor.
/// Only `ToolRegistry::bind` constructs one.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCall {
    call: ToolCall,
    endpoint: String,
}

impl BoundCall {
    pub(super) fn new(call: ToolCall, endpoint: String) -> Self {
        Self { call, endpoint }
    }

    pub fn call(&self) -> &ToolCall {
        &self.call
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn into_call(self) -> ToolCall {
        self.call
    }
}

pub trait ToolInvoker: Send + Sync {
    /// Never fails: transport problems come back as `status=error` results.
    fn invoke(&self, call: &BoundCall) -> ToolResult;
}

/// Turn a `{"status","data","message"}` response body into a result.
pub fn result_from_response(tool_name: &str, body: &Value) -> ToolResult {
    let status = match body.get("status").and_then(Value::as_str) {
        Some("ok") => ToolStatus::Ok,
        Some(_) => ToolStatus::Error,
        None => return ToolResult::failure(tool_name, "response has no status field"),
    };
    let raw = body.get("data").cloned().unwrap_or(Value::Null);
    let message = body.get("message").and_then(Value::as_str).unwrap_or_default().to_string();
    normalize_result(tool_name, status, raw, message)
}

#[derive(Debug, Clone)]
pub struct HttpInvoker {
    base_url: String,
    agent: ureq::Agent,
}

pub const TOOL_TIMEOUT: Duration = Duration::from_secs(10);

impl HttpInvoker {
    pub fn new(base_url: &str) -> Self {
        Self::with_timeout(base_url, TOOL_TIMEOUT)
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        Self { base_url: base_url.trim_end_matches('/').to_string(), agent }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl ToolInvoker for HttpInvoker {
    fn invoke(&self, call: &BoundCall) -> ToolResult {
        let name = &call.call().tool_name;
        let url = format!("{}{}", self.base_url, call.endpoint());
        let response = self.agent.post(&url).send_json(json!({ "arguments": call.call().arguments }));
        let mut response = match response {
            Ok(r) => r,
            Err(e) => return ToolResult::failure(name, format!("request to {url} failed: {e}")),
        };
        let code = response.status();
        let body: Result<Value, _> = response.body_mut().read_json();
        match body {
            Ok(body) if body.get("status").is_some() => result_from_response(name, &body),
            _ if !code.is_success() => ToolResult::failure(name, format!("HTTP {} from {url}", code.as_u16())),
            Ok(_) => ToolResult::failure(name, "response has no status field"),
            Err(e) => ToolResult::failure(name, format!("unreadable response from {url}: {e}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tool_registry::{ArgMap, ParamSpec, ParamType, ToolDescriptor, ToolRegistry};

    #[test]
    fn server_down_is_an_error_result() {
        let mut reg = ToolRegistry::new();
        reg.register_tool(ToolDescriptor::new("wdr_report", "workload report", vec![ParamSpec::optional("hours", ParamType::Int)]))
            .unwrap();
        // port 9 on localhost: nothing listens
        let invoker = HttpInvoker::with_timeout("http://127.0.0.1:9", Duration::from_millis(500));
        let call = ToolCall { tool_name: "wdr_report".into(), arguments: ArgMap::new(), session_id: "s".into() };
        let result = reg.invoke(call, &invoker).unwrap();
        assert_eq!(result.status, ToolStatus::Error);
        assert!(result.normalized_text.contains("failed"));
    }

    #[test]
    fn response_without_status_is_error() {
        let r = result_from_response("x", &json!({"data": {}}));
        assert_eq!(r.status, ToolStatus::Error);
    }
}
