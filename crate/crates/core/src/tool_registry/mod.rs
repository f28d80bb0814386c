//! Diagnostic tools: descriptors, selection over their usage text, parameter
//! filling, invocation over REST, and result normalization.

pub mod invoke;
pub mod mock_server;
pub mod normalize;
pub mod params;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb_ingest::{Chunk, KnowledgeBase};
use crate::retrieval::{HybridRetriever, RetrievalConfig};

pub use invoke::{BoundCall, HttpInvoker, ToolInvoker};
pub use normalize::normalize_result;
pub use params::{coerce_value, fill_parameters, FillOutcome};

/// Bound argument values keyed by parameter name.
pub type ArgMap = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("tool {0} is already registered")]
    DuplicateName(String),
    #[error("unknown tool {0}")]
    ToolNotFound(String),
    #[error("tool {tool} called with unbound or invalid arguments: {missing:?}")]
    UnboundArguments { tool: String, missing: Vec<String> },
    #[error("parameter {param} expects {expected}, got {value}")]
    TypeMismatch { param: String, expected: String, value: String },
    #[error("tool config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Int,
    Float,
    Enum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub param_type: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
    /// Regex whose first capture group extracts this parameter from free text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
}

impl ParamSpec {
    pub fn required(name: &str, param_type: ParamType) -> Self {
        Self { name: name.into(), param_type, required: true, enum_values: None, pattern: None }
    }

    pub fn optional(name: &str, param_type: ParamType) -> Self {
        Self { required: false, ..Self::required(name, param_type) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    pub endpoint: String,
}

impl ToolDescriptor {
    pub fn new(name: &str, description: &str, params: Vec<ParamSpec>) -> Self {
        Self { name: name.into(), description: description.into(), params, endpoint: format!("/tools/{name}") }
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn required_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.required)
    }

    fn selection_text(&self) -> String {
        format!("{} {}", self.name, self.description)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToolCall {
    pub tool_name: String,
    pub arguments: ArgMap,
    pub session_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric: String,
    pub points: Vec<(i64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool_name: String,
    pub status: ToolStatus,
    /// The `data` payload of the tool response.
    pub raw: serde_json::Value,
    pub message: String,
    pub normalized_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<MetricSeries>>,
}

impl ToolResult {
    pub fn failure(tool_name: &str, reason: impl Into<String>) -> Self {
        let reason = reason.into();
        Self {
            tool_name: tool_name.into(),
            status: ToolStatus::Error,
            raw: serde_json::Value::Null,
            normalized_text: format!("Tool {tool_name} failed: {reason}"),
            message: reason,
            metrics: None,
        }
    }
}

/// Tools in registration order plus a lazily built retrieval index over
/// their descriptions.
#[derive(Debug, Default)]
pub struct ToolRegistry {
    tools: Vec<ToolDescriptor>,
    by_name: HashMap<String, usize>,
    selector: OnceLock<HybridRetriever>,
}

impl Clone for ToolRegistry {
    fn clone(&self) -> Self {
        Self { tools: self.tools.clone(), by_name: self.by_name.clone(), selector: OnceLock::new() }
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse a JSON array of descriptors and register each in order.
    pub fn from_json(text: &str) -> Result<Self, ToolError> {
        let descriptors: Vec<ToolDescriptor> = serde_json::from_str(text).map_err(|e| ToolError::Config(format!("tools file: {e}")))?;
        let mut reg = Self::new();
        for d in descriptors {
            reg.register_tool(d)?;
        }
        Ok(reg)
    }

    pub fn register_tool(&mut self, mut descriptor: ToolDescriptor) -> Result<(), ToolError> {
        if self.by_name.contains_key(&descriptor.name) {
            return Err(ToolError::DuplicateName(descriptor.name));
        }
        for p in &descriptor.params {
            if p.param_type == ParamType::Enum && p.enum_values.as_ref().is_none_or(|v| v.is_empty()) {
                return Err(ToolError::Config(format!("{}.{}: enum parameter without values", descriptor.name, p.name)));
            }
            if let Some(pat) = &p.pattern {
                regex::Regex::new(pat).map_err(|e| ToolError::Config(format!("{}.{}: {e}", descriptor.name, p.name)))?;
            }
        }
        // stable: required first, declaration order otherwise
        descriptor.params.sort_by_key(|p| !p.required);
        self.by_name.insert(descriptor.name.clone(), self.tools.len());
        self.tools.push(descriptor);
        self.selector = OnceLock::new();
        Ok(())
    }

    pub fn list(&self) -> &[ToolDescriptor] {
        &self.tools
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ToolDescriptor> {
        self.by_name.get(name).map(|&i| &self.tools[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    fn selector(&self) -> &HybridRetriever {
        self.selector.get_or_init(|| {
            let chunks = self
                .tools
                .iter()
                .map(|t| Chunk::new(t.name.clone(), t.selection_text(), String::new(), Vec::new(), "tools".into()))
                .collect();
            let config = RetrievalConfig { candidate_depth: self.tools.len().max(1), neighbor_radius: 0 };
            HybridRetriever::new(Arc::new(KnowledgeBase::from_chunks(chunks))).with_config(config)
        })
    }

    /// Best `k` tools for `context`; tools whose rerank score is negative never appear.
    pub fn select_tools(&self, context: &str, k: usize) -> Vec<&ToolDescriptor> {
        self.select_among(context, k, None)
    }

    /// Like `select_tools` but restricted to the names in `allowed`.
    pub fn select_among(&self, context: &str, k: usize, allowed: Option<&[String]>) -> Vec<&ToolDescriptor> {
        if self.tools.is_empty() || k == 0 {
            return Vec::new();
        }
        let ranked = self.selector().retrieve(context, self.tools.len()).unwrap_or_default();
        ranked.iter().filter(|s| allowed.is_none_or(|a| a.contains(&s.chunk_id))).filter_map(|s| self.get(&s.chunk_id)).take(k).collect()
    }

    /// Validate a call; the result is the only thing an invoker accepts.
    pub fn bind(&self, call: ToolCall) -> Result<BoundCall, ToolError> {
        let tool = self.get(&call.tool_name).ok_or_else(|| ToolError::ToolNotFound(call.tool_name.clone()))?;
        let mut bad = Vec::new();
        for p in &tool.params {
            match call.arguments.get(&p.name) {
                None if p.required => bad.push(p.name.clone()),
                None => {}
                Some(v) if coerce_value(p, v).map(|c| c != *v).unwrap_or(true) => bad.push(p.name.clone()),
                Some(_) => {}
            }
        }
        let unknown = call.arguments.keys().filter(|k| tool.param(k).is_none()).cloned();
        bad.extend(unknown);
        if !bad.is_empty() {
            return Err(ToolError::UnboundArguments { tool: call.tool_name, missing: bad });
        }
        Ok(BoundCall::new(call, tool.endpoint.clone()))
    }

    pub fn invoke(&self, call: ToolCall, invoker: &dyn ToolInvoker) -> Result<ToolResult, ToolError> {
        let bound = self.bind(call)?;
        Ok(invoker.invoke(&bound))
    }
}
