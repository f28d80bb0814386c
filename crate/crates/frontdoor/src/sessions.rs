//! In-memory session store for diagnosis runs.
//!
//! Each session has two locks: `run` serializes the operations that drive the
//! diagnosis, and `view` holds the snapshot that polling reads, so a poll never
//! waits for a running step. Sessions are lost on restart.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};
use std::time::{Duration, Instant};

use dbcopilot::diag_agents::{DiagError, DiagnosisEngine, DiagnosisReport, DiagnosisRun, RunState, TraceEvent};
use dbcopilot::tool_registry::{ArgMap, ParamSpec};
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("unknown session {0}")]
    Unknown(String),
    #[error("session {0} is not awaiting parameters")]
    NotAwaiting(String),
    #[error(transparent)]
    Diag(#[from] DiagError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    Qa,
    Diagnosis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    AwaitingParams,
    Done,
}

/// What a poll returns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub state: SessionState,
    pub trace_so_far: Vec<TraceEvent>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<DiagnosisReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pending_params: Option<Vec<ParamSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub session_id: String,
    #[serde(skip)]
    pub kind: SessionKind,
    #[serde(skip)]
    pub created_at: String,
}

impl SessionView {
    fn sync(&mut self, run: &DiagnosisRun) {
        self.state = match run.state {
            RunState::Active => SessionState::Active,
            RunState::AwaitingParams { .. } => SessionState::AwaitingParams,
            RunState::Done => SessionState::Done,
        };
        self.pending_params = run.pending_params().map(<[ParamSpec]>::to_vec);
        self.trace_so_far.clone_from(&run.events);
        self.report.clone_from(&run.report);
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

#[derive(Debug)]
struct Entry {
    view: Mutex<SessionView>,
    run: Mutex<DiagnosisRun>,
    last_access: Mutex<Instant>,
}

impl Entry {
    fn touch(&self, now: Instant) {
        *lock(&self.last_access) = now;
    }
}

/// Drive a run under its lock, publishing a snapshot after every step.
fn drive(
    entry: &Entry,
    op: impl FnOnce(&mut DiagnosisRun, &mut dyn FnMut(&DiagnosisRun)) -> Result<(), DiagError>,
    run: &mut DiagnosisRun,
) -> Result<(), DiagError> {
    let mut publish = |r: &DiagnosisRun| lock(&entry.view).sync(r);
    let result = op(run, &mut publish);
    let mut view = lock(&entry.view);
    view.sync(run);
    if let Err(e) = &result {
        view.state = SessionState::Done;
        view.pending_params = None;
        view.error = Some(e.to_string());
    }
    drop(view);
    entry.touch(Instant::now());
    result
}

#[derive(Debug)]
pub struct SessionStore {
    entries: Mutex<HashMap<String, Arc<Entry>>>,
    ttl: Duration,
}

impl Default for SessionStore {
    fn default() -> Self {
        Self::new(DEFAULT_TTL)
    }
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        Self { entries: Mutex::new(HashMap::new()), ttl }
    }

    /// Register a started run; it is not driven yet.
    pub fn insert(&self, run: DiagnosisRun) -> String {
        self.sweep(Instant::now());
        let session_id = format!("sess-{}", uuid::Uuid::new_v4().simple());
        let mut view = SessionView {
            state: SessionState::Active,
            trace_so_far: Vec::new(),
            report: None,
            pending_params: None,
            error: None,
            session_id: session_id.clone(),
            kind: SessionKind::Diagnosis,
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        view.sync(&run);
        let entry = Arc::new(Entry { view: Mutex::new(view), run: Mutex::new(run), last_access: Mutex::new(Instant::now()) });
        lock(&self.entries).insert(session_id.clone(), entry);
        session_id
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, SessionError> {
        let entry = lock(&self.entries).get(id).cloned().ok_or_else(|| SessionError::Unknown(id.to_string()))?;
        entry.touch(Instant::now());
        Ok(entry)
    }

    pub fn view(&self, id: &str) -> Result<SessionView, SessionError> {
        Ok(lock(&self.entry(id)?.view).clone())
    }

    pub fn contains(&self, id: &str) -> bool {
        lock(&self.entries).contains_key(id)
    }

    pub fn len(&self) -> usize {
        lock(&self.entries).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Run rounds until the diagnosis finishes or pauses.
    pub fn advance(&self, id: &str, engine: &DiagnosisEngine) -> Result<(), SessionError> {
        let entry = self.entry(id)?;
        let mut run = lock(&entry.run);
        drive(&entry, |r, obs| r.advance_observed(engine, obs), &mut run)?;
        Ok(())
    }

    /// Check that the session is paused, then resume it.
    /// `accepted` fires once the values are taken, before the run continues.
    pub fn resume(&self, id: &str, engine: &DiagnosisEngine, values: ArgMap, accepted: impl FnOnce()) -> Result<(), SessionError> {
        let entry = self.entry(id)?;
        let mut run = lock(&entry.run);
        if !matches!(run.state, RunState::AwaitingParams { .. }) {
            return Err(SessionError::NotAwaiting(id.to_string()));
        }
        {
            let mut view = lock(&entry.view);
            view.state = SessionState::Active;
            view.pending_params = None;
        }
        accepted();
        drive(&entry, |r, obs| r.resume_observed(engine, values, obs), &mut run)?;
        Ok(())
    }

    /// Drop sessions idle for longer than the TTL; a session whose run is
    /// being driven is never dropped.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut entries = lock(&self.entries);
        let before = entries.len();
        entries.retain(|_, e| {
            let idle = now.saturating_duration_since(*lock(&e.last_access));
            idle <= self.ttl || e.run.try_lock().is_err()
        });
        before - entries.len()
    }
}
