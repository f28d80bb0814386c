//! Response bodies shared by the HTTP API and the CLI's `--json` output.

use dbcopilot::qa_pipeline::{Answer, SourceRef};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskRequest {
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AskResponse {
    pub answer_id: String,
    pub text: String,
    pub refused: bool,
    pub sources: Vec<SourceRef>,
}

impl From<Answer> for AskResponse {
    fn from(a: Answer) -> Self {
        Self { answer_id: a.answer_id, text: a.text, refused: a.refused, sources: a.sources }
    }
}

impl AskResponse {
    /// Answer text followed by a source list, as the CLI prints it.
    pub fn to_markdown(&self) -> String {
        let mut out = self.text.trim_end().to_string();
        if !self.sources.is_empty() {
            out.push_str("\n\nSources:\n");
            for s in &self.sources {
                out.push_str(&format!("- [{}] {} ({}, score {:.4})\n", s.chunk_id, s.source, s.version_tag, s.score));
            }
        } else {
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FeedbackRequest {
    pub answer_id: String,
    pub verdict: dbcopilot::qa_pipeline::Verdict,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DiagnoseRequest {
    pub alert: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseResponse {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ParamsRequest {
    pub values: dbcopilot::tool_registry::ArgMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OkBody {
    pub ok: bool,
}

pub const OK: OkBody = OkBody { ok: true };

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DocumentAdded {
    pub chunks_added: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Health {
    pub ok: bool,
    pub kb_chunks: usize,
    pub tools_registered: usize,
}

/// JSON with every non-ASCII char escaped, so it fits in a header value.
pub fn ascii_json<T: Serialize>(value: &T) -> String {
    let raw = serde_json::to_string(value).expect("payload serializes");
    let mut out = String::with_capacity(raw.len());
    for c in raw.chars() {
        if c.is_ascii() {
            out.push(c);
        } else {
            let mut buf = [0u16; 2];
            for unit in c.encode_utf16(&mut buf) {
                out.push_str(&format!("\\u{unit:04x}"));
            }
        }
    }
    out
}

/// Split on char boundaries into pieces of at most `size` bytes (one char minimum).
pub fn chunk_text(text: &str, size: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if !cur.is_empty() && cur.len() + c.len_utf8() > size {
            out.push(std::mem::take(&mut cur));
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
