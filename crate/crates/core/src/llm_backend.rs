//! Text-generation backends.
//!
//! [`ScriptedBackend`] replays canned responses selected by triggers over the
//! last user message, which makes every pipeline test a fixture.
//! [`HttpBackend`] speaks the common chat-completion JSON protocol.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("script has no default response")]
    ScriptMissingDefault,
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

/// Send a single user message.
pub fn ask(llm: &dyn LlmBackend, prompt: &str) -> Result<String, LlmError> {
    llm.complete(&[ChatMessage::user(prompt)])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub trigger: String,
    #[serde(default)]
    pub is_regex: bool,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
    pub default: Option<String>,
}

impl Script {
    /// Accepts `{"entries": [...], "default": "..."}` or a bare array whose
    /// elements are entries or a single `{"default": "..."}` object.
    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| LlmError::InvalidScript(e.to_string()))?;
        match value {
            serde_json::Value::Array(items) => {
                let mut script = Script::default();
                for item in items {
                    if let Some(d) = item.get("default").and_then(|d| d.as_str()) {
                        if item.get("trigger").is_none() {
                            script.default = Some(d.to_string());
                            continue;
                        }
                    }
                    let entry: ScriptEntry = serde_json::from_value(item).map_err(|e| LlmError::InvalidScript(e.to_string()))?;
                    script.entries.push(entry);
                }
                Ok(script)
            }
            other => serde_json::from_value(other).map_err(|e| LlmError::InvalidScript(e.to_string())),
        }
    }
}

#[derive(Debug)]
enum Matcher {
    Substring(String),
    Pattern(Regex),
}

/// First entry whose trigger matches the last user message wins.
///
/// Regex responses may reference capture groups (`$1`, `${name}`).
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: Vec<(Matcher, String)>,
    default: String,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Result<Self, LlmError> {
        let default = script.default.ok_or(LlmError::ScriptMissingDefault)?;
        let entries = script
            .entries
            .into_iter()
            .map(|e| {
                let m = if e.is_regex {
                    Matcher::Pattern(Regex::new(&e.trigger).map_err(|err| LlmError::InvalidScript(err.to_string()))?)
                } else {
                    Matcher::Substring(e.trigger)
                };
                Ok((m, e.response))
            })
            .collect::<Result<Vec<_>, LlmError>>()?;
        Ok(Self { entries, default, calls: AtomicUsize::new(0) })
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        Self::new(Script::from_json(text)?)
    }

    /// Backend that answers everything with `response`.
    pub fn constant(response: impl Into<String>) -> Self {
        Self { entries: Vec::new(), default: response.into(), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let last_user = messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str());
        for (matcher, response) in &self.entries {
            match matcher {
                Matcher::Substring(s) if last_user.contains(s.as_str()) => return Ok(response.clone()),
                Matcher::Pattern(re) => {
                    if let Some(caps) = re.captures(last_user) {
                        let mut out = String::new();
                        caps.expand(response, &mut out);
                        return Ok(out);
                    }
                }
                _ => {}
            }
        }
        Ok(self.default.clone())
    }
}

/// Always fails; stands in for an unreachable model.
#[derive(Debug, Default)]
pub struct UnavailableBackend;

impl LlmBackend for UnavailableBackend {
    fn complete(&self, _messages: &[ChatMessage]) -> Result<String, LlmError> {
        Err(LlmError::BackendUnavailable("no backend configured".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub script_file: Option<String>,
    pub base_url: Option<String>,
    pub model_name: Option<String>,
    pub timeout_s: u64,
    pub max_retries: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { kind: BackendKind::Scripted, script_file: None, base_url: None, model_name: None, timeout_s: 30, max_retries: 1 }
    }
}

impl BackendConfig {
    /// Overlay `COPILOT_LLM_KIND`, `COPILOT_LLM_URL`, `COPILOT_LLM_MODEL`, `COPILOT_LLM_SCRIPT`.
    pub fn apply_env(mut self) -> Result<Self, LlmError> {
        self.apply_vars(|k| std::env::var(k).ok())?;
        Ok(self)
    }

    fn apply_vars(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), LlmError> {
        if let Some(kind) = get("COPILOT_LLM_KIND") {
            self.kind = match kind.to_ascii_lowercase().as_str() {
                "scripted" => BackendKind::Scripted,
                "http" => BackendKind::Http,
                other => return Err(LlmError::Config(format!("unknown COPILOT_LLM_KIND `{other}`"))),
            };
        }
        if let Some(url) = get("COPILOT_LLM_URL") {
            self.base_url = Some(url);
        }
        if let Some(model) = get("COPILOT_LLM_MODEL") {
            self.model_name = Some(model);
        }
        if let Some(script) = get("COPILOT_LLM_SCRIPT") {
            self.script_file = Some(script);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.kind {
            BackendKind::Scripted if self.script_file.is_none() => Err(LlmError::Config("scripted backend needs script_file".into())),
            BackendKind::Http if self.base_url.is_none() => Err(LlmError::Config("http backend needs base_url".into())),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn LlmBackend>, LlmError> {
        self.validate()?;
        match self.kind {
            BackendKind::Scripted => {
                let path = self.script_file.as_deref().unwrap_or_default();
                let text = std::fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{path}: {e}")))?;
                Ok(Arc::new(ScriptedBackend::from_json(&text)?))
            }
            BackendKind::Http => Ok(Arc::new(HttpBackend::new(self)?)),
        }
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    url: String,
    model: String,
    max_retries: u32,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, LlmError> {
        let base = cfg.base_url.clone().ok_or_else(|| LlmError::Config("http backend needs base_url".into()))?;
        let base = base.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") { base.to_string() } else { format!("{base}/v1/chat/completions") };
        let agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(cfg.timeout_s))).build().into();
        Ok(Self { url, model: cfg.model_name.clone().unwrap_or_else(|| "default".into()), max_retries: cfg.max_retries, agent })
    }

    fn attempt(&self, messages: &[ChatMessage]) -> Result<String, String> {
        let payload = serde_json::json!({ "model": self.model, "messages": messages, "stream": false });
        let body: serde_json::Value =
            self.agent.post(&self.url).send_json(payload).map_err(|e| e.to_string())?.body_mut().read_json().map_err(|e| e.to_string())?;
        body.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            match self.attempt(messages) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "chat completion failed");
                    last = e;
                }
            }
        }
        Err(LlmError::BackendUnavailable(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script() -> ScriptedBackend {
        ScriptedBackend::from_json(
            r#"{"entries":[
                {"trigger":"intent","response":"QA"},
                {"trigger":"Context:\\n(?s)(.*?)\\n\\nQuestion","is_regex":true,"response":"echo: $1"}
            ],"default":"fallback"}"#,
        )
        .unwrap()
    }

    #[test]
    fn substring_trigger() {
        assert_eq!(ask(&script(), "classify the intent please").unwrap(), "QA");
    }

    #[test]
    fn default_when_nothing_matches() {
        assert_eq!(ask(&script(), "hello").unwrap(), "fallback");
    }

    #[test]
    fn deterministic_and_counted() {
        let s = script();
        let msgs = [ChatMessage::system("sys"), ChatMessage::user("hello")];
        assert_eq!(s.complete(&msgs).unwrap(), s.complete(&msgs).unwrap());
        assert_eq!(s.calls(), 2);
    }

    #[test]
    fn regex_capture_expansion() {
        assert_eq!(ask(&script(), "Context:\n[a#0000] text\n\nQuestion: q").unwrap(), "echo: [a#0000] text");
    }

    #[test]
    fn only_last_user_message_is_matched() {
        let msgs = [ChatMessage::user("intent"), ChatMessage::assistant("x"), ChatMessage::user("other")];
        assert_eq!(script().complete(&msgs).unwrap(), "fallback");
    }

    #[test]
    fn missing_default_rejected() {
        assert!(matches!(ScriptedBackend::from_json(r#"{"entries":[]}"#), Err(LlmError::ScriptMissingDefault)));
    }

    #[test]
    fn array_form_accepted() {
        let s = ScriptedBackend::from_json(r#"[{"trigger":"a1","response":"r"},{"default":"d"}]"#).unwrap();
        assert_eq!(ask(&s, "a1").unwrap(), "r");
        assert_eq!(ask(&s, "zz").unwrap(), "d");
    }

    #[test]
    fn config_invariants_and_env() {
        let mut cfg = BackendConfig::default();
        assert!(cfg.validate().is_err());
        cfg.apply_vars(|k| match k {
            "COPILOT_LLM_KIND" => Some("http".into()),
            "COPILOT_LLM_URL" => Some("http://127.0.0.1:9".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.kind, BackendKind::Http);
        assert!(cfg.validate().is_ok());
        assert!(cfg.apply_vars(|k| (k == "COPILOT_LLM_KIND").then(|| "grpc".into())).is_err());
    }

    #[test]
    fn unreachable_http_is_backend_unavailable() {
        let cfg = BackendConfig {
            kind: BackendKind::Http,
            base_url: Some("http://127.0.0.1:9".into()),
            timeout_s: 1,
            max_retries: 1,
            ..Default::default()
        };
        let backend = HttpBackend::new(&cfg).unwrap();
        assert!(matches!(ask(&backend, "hi"), Err(LlmError::BackendUnavailable(_))));
    }
}
