use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::QaError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Helpful,
    MissingSolution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub answer_id: String,
    pub verdict: Verdict,
    pub note: String,
    pub ts: String,
}

#[derive(Debug, Default)]
struct Inner {
    answers: HashSet<String>,
    records: Vec<FeedbackRecord>,
}

/// Append-only feedback store, optionally mirrored to a JSON-Lines file.
#[derive(Debug, Default)]
pub struct FeedbackLog {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl FeedbackLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create on first append) a log file, loading any existing records.
    pub fn open(path: &Path) -> Result<Self, QaError> {
        let mut inner = Inner::default();
        match std::fs::read_to_string(path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let rec: FeedbackRecord =
                        serde_json::from_str(line).map_err(|e| QaError::Io(format!("{} line {}: {e}", path.display(), i + 1)))?;
                    inner.answers.insert(rec.answer_id.clone());
                    inner.records.push(rec);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(QaError::Io(e.to_string())),
        }
        Ok(Self { path: Some(path.to_path_buf()), inner: Mutex::new(inner) })
    }

    pub fn register_answer(&self, answer_id: &str) {
        self.inner.lock().expect("feedback lock").answers.insert(answer_id.to_string());
    }

    pub fn record(&self, answer_id: &str, verdict: Verdict, note: &str) -> Result<FeedbackRecord, QaError> {
        let mut inner = self.inner.lock().expect("feedback lock");
        if !inner.answers.contains(answer_id) {
            return Err(QaError::UnknownAnswerId(answer_id.to_string()));
        }
        let rec = FeedbackRecord {
            answer_id: answer_id.to_string(),
            verdict,
            note: note.to_string(),
            ts: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| QaError::Io(format!("{}: {e}", path.display())))?;
        }
        inner.records.push(rec.clone());
        Ok(rec)
    }

    pub fn records_for(&self, answer_id: &str) -> Vec<FeedbackRecord> {
        let inner = self.inner.lock().expect("feedback lock");
        inner.records.iter().filter(|r| r.answer_id == answer_id).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("feedback lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
