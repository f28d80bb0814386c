//! Multi-agent diagnosis: a chief recruits experts by description match,
//! hands out tree-guided tasks, experts run tools and reflect on results,
//! cross-review moves work between experts, and findings become a report.

pub mod report;
pub mod run;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagtree::{DiagnosisTree, TreeError};
use crate::kb_ingest::{Chunk, KnowledgeBase};
use crate::llm_backend::{ask, LlmBackend};
use crate::retrieval::{HybridRetriever, RetrievalConfig};
use crate::tool_registry::{ToolError, ToolRegistry};

pub use report::{DiagnosisReport, Evidence, ExpertSummary, RootCause};
pub use run::{DiagnosisConfig, DiagnosisEngine, DiagnosisRun, RunState, TraceEvent};

pub const CHIEF_ID: &str = "dba_chief";
pub const GENERALIST_ID: &str = "generalist";
pub const MAX_PROPOSED_STEPS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("alert text is empty")]
    EmptyAlert,
    #[error("agent profiles: {0}")]
    Config(String),
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error("agent {0} cannot send a cross-review message to itself")]
    SelfReview(String),
    #[error("diagnosis is not awaiting parameters")]
    NotAwaitingParams,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Tool(#[from] ToolError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub allowed_tools: Vec<String>,
}

impl AgentProfile {
    pub fn may_use(&self, tool: &str) -> bool {
        self.allowed_tools.iter().any(|t| t == tool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Running,
    Done,
    HandedOff,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DiagnosisTask {
    pub task_id: String,
    pub assignee: String,
    pub instruction: String,
    pub status: TaskStatus,
    /// Tree node this task executes, when it came from a diagnosis tree.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    /// How many earlier attempts led to this follow-up task.
    pub retries: u32,
}

impl DiagnosisTask {
    pub fn advance(&mut self, next: TaskStatus) {
        let ok = matches!(
            (self.status, next),
            (TaskStatus::Pending, TaskStatus::Running) | (TaskStatus::Running, TaskStatus::Done | TaskStatus::HandedOff)
        );
        debug_assert!(ok, "task {} cannot go from {:?} to {:?}", self.task_id, self.status, next);
        if ok {
            self.status = next;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CrossReviewMessage {
    pub from_agent: String,
    pub to_agent: String,
    pub payload: String,
    pub suggested_tasks: Vec<DiagnosisTask>,
}

/// Bundled expert profiles plus the synthetic generalist used as fallback.
#[derive(Debug)]
pub struct AgentRoster {
    profiles: Vec<AgentProfile>,
    generalist: AgentProfile,
    index: HybridRetriever,
}

impl AgentRoster {
    pub fn new(profiles: Vec<AgentProfile>, registry: &ToolRegistry) -> Result<Self, DiagError> {
        for p in &profiles {
            if p.description.trim().is_empty() {
                return Err(DiagError::Config(format!("{} has an empty description", p.agent_id)));
            }
            if let Some(t) = p.allowed_tools.iter().find(|t| !registry.contains(t)) {
                return Err(DiagError::Config(format!("{} lists unregistered tool {t}", p.agent_id)));
            }
        }
        let mut ids: Vec<&str> = profiles.iter().map(|p| p.agent_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) || ids.contains(&GENERALIST_ID) {
            return Err(DiagError::Config("agent ids must be unique and must not be 'generalist'".into()));
        }
        let generalist = AgentProfile {
            agent_id: GENERALIST_ID.into(),
            name: "Generalist Expert".into(),
            description: "General database troubleshooting with every registered diagnostic tool.".into(),
            allowed_tools: registry.list().iter().map(|t| t.name.clone()).collect(),
        };
        let chunks: Vec<Chunk> = profiles
            .iter()
            .filter(|p| !p.allowed_tools.is_empty())
            .map(|p| Chunk::new(p.agent_id.clone(), format!("{} {}", p.name, p.description), String::new(), Vec::new(), "agents".into()))
            .collect();
        let n = chunks.len().max(1);
        let index = HybridRetriever::new(Arc::new(KnowledgeBase::from_chunks(chunks)))
            .with_config(RetrievalConfig { candidate_depth: n, neighbor_radius: 0 });
        Ok(Self { profiles, generalist, index })
    }

    pub fn from_json(text: &str, registry: &ToolRegistry) -> Result<Self, DiagError> {
        let profiles: Vec<AgentProfile> = serde_json::from_str(text).map_err(|e| DiagError::Config(e.to_string()))?;
        Self::new(profiles, registry)
    }

    pub fn profiles(&self) -> &[AgentProfile] {
        &self.profiles
    }

    pub fn generalist(&self) -> &AgentProfile {
        &self.generalist
    }

    pub fn get(&self, agent_id: &str) -> Option<&AgentProfile> {
        self.profiles.iter().chain(std::iter::once(&self.generalist)).find(|p| p.agent_id == agent_id)
    }

    /// Resolve an id or a display name, case-insensitively.
    pub fn resolve(&self, name_or_id: &str) -> Option<&AgentProfile> {
        let key = name_or_id.trim();
        self.profiles
            .iter()
            .chain(std::iter::once(&self.generalist))
            .find(|p| p.agent_id.eq_ignore_ascii_case(key) || p.name.eq_ignore_ascii_case(key))
    }

    /// First tool-owning profile allowed to run `tool`, generalist otherwise.
    pub fn owner_of(&self, tool: &str) -> &AgentProfile {
        self.profiles.iter().find(|p| p.may_use(tool)).unwrap_or(&self.generalist)
    }

    /// Experts ranked by description match; only positive reranks count.
    pub fn assign_experts(&self, alert: &str, k: usize) -> Vec<&AgentProfile> {
        let ranked = self.index.retrieve(alert, k.max(1)).unwrap_or_default();
        let picked: Vec<&AgentProfile> = ranked.iter().filter(|s| s.score > 0.0).filter_map(|s| self.get(&s.chunk_id)).collect();
        if picked.is_empty() {
            vec![&self.generalist]
        } else {
            picked
        }
    }
}

pub const STEPS_PROMPT: &str = "PROPOSE STEPS\nYou are the {expert}. List troubleshooting steps for the alert below, \
using the retrieved documents where relevant.\nReply with the header STEPS: followed by one step per line.\n";

/// Tree tasks for the run of first-edge nodes owned by `expert`, starting at
/// the root, plus one verification task; without a tree the LLM proposes steps.
pub fn decompose_tasks(
    alert: &str,
    expert: &AgentProfile,
    tree: Option<&DiagnosisTree>,
    docs: &[String],
    llm: Option<&dyn LlmBackend>,
) -> Result<Vec<DiagnosisTask>, DiagError> {
    if alert.trim().is_empty() {
        return Err(DiagError::EmptyAlert);
    }
    let task = |instruction: String, node_id: Option<String>| DiagnosisTask {
        task_id: String::new(),
        assignee: expert.agent_id.clone(),
        instruction,
        status: TaskStatus::Pending,
        node_id,
        retries: 0,
    };
    let mut tasks = Vec::new();
    if let Some(tree) = tree {
        for node in tree.first_edge_path() {
            match &node.tool_name {
                Some(tool) if expert.may_use(tool) => tasks.push(task(node.display_title(), Some(node.node_id.clone()))),
                _ => break,
            }
        }
        if !tasks.is_empty() {
            tasks.push(task(format!("Verify the findings for: {}", alert.trim()), None));
        }
        return Ok(tasks);
    }
    if let Some(llm) = llm {
        let mut prompt = STEPS_PROMPT.replace("{expert}", &expert.name);
        prompt.push_str(&format!("Alert: {}\n", alert.trim()));
        for d in docs.iter().take(3) {
            prompt.push_str(&format!("Document: {d}\n"));
        }
        if let Ok(reply) = ask(llm, &prompt) {
            if let Some((_, body)) = reply.split_once("STEPS:") {
                tasks.extend(
                    body.lines()
                        .map(|l| l.trim().trim_start_matches(|c: char| c == '-' || c == '*' || c.is_ascii_digit() || c == '.').trim())
                        .filter(|l| !l.is_empty())
                        .take(MAX_PROPOSED_STEPS)
                        .map(|l| task(l.to_string(), None)),
                );
            }
        }
    }
    if tasks.is_empty() {
        tasks.push(task(format!("Investigate: {}", alert.trim()), None));
    }
    Ok(tasks)
}
