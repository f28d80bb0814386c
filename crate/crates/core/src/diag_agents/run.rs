use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use super::report::{aggregate, DiagnosisReport, Evidence, RootCause};
use super::{decompose_tasks, AgentProfile, AgentRoster, CrossReviewMessage, DiagError, DiagnosisTask, TaskStatus};
use crate::diagtree::{StepEnv, Traversal, TreeError, TreeLibrary, TreeMatch};
use crate::llm_backend::{ask, LlmBackend};
use crate::text::fnv1a64;
use crate::tool_registry::{fill_parameters, ArgMap, FillOutcome, ParamSpec, ToolCall, ToolInvoker, ToolRegistry, ToolResult, ToolStatus};

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosisConfig {
    pub round_limit: usize,
    pub task_cap: usize,
    pub max_retries: u32,
    pub experts_k: usize,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self { round_limit: 8, task_cap: 6, max_retries: 2, experts_k: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub seq: usize,
    pub round: usize,
    pub agent: String,
    pub kind: String,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolCallRecord {
    pub task_id: String,
    pub agent_id: String,
    pub call: ToolCall,
    pub status: ToolStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunState {
    Active,
    AwaitingParams { task_id: String, tool_name: String, pending_params: Vec<ParamSpec> },
    Done,
}

#[derive(Debug, Clone, Serialize)]
pub(super) struct ExpertState {
    pub profile: AgentProfile,
    pub queue: VecDeque<DiagnosisTask>,
    pub finished: Vec<DiagnosisTask>,
    pub started: usize,
    pub findings: Vec<String>,
    #[serde(skip)]
    pub invoked: BTreeSet<String>,
}

/// Outcome of one expert turn.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Concluded(String),
    NeedsMore(String),
    Handoff(CrossReviewMessage),
    Paused { tool_name: String, missing: Vec<ParamSpec> },
}

/// Everything a run needs besides its own state.
#[derive(Clone)]
pub struct DiagnosisEngine {
    pub registry: Arc<ToolRegistry>,
    pub invoker: Arc<dyn ToolInvoker>,
    pub llm: Arc<dyn LlmBackend>,
    pub library: Arc<TreeLibrary>,
    pub roster: Arc<AgentRoster>,
    pub config: DiagnosisConfig,
}

impl std::fmt::Debug for DiagnosisEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiagnosisEngine").field("tools", &self.registry.len()).field("config", &self.config).finish()
    }
}

impl DiagnosisEngine {
    /// Engine over the bundled tools, trees, history and agent profiles.
    pub fn bundled(invoker: Arc<dyn ToolInvoker>, llm: Arc<dyn LlmBackend>) -> Result<Self, DiagError> {
        let registry = Arc::new(crate::bundled::tool_registry()?);
        let library = crate::bundled::tree_library()?;
        library.validate_against(&registry)?;
        let roster = Arc::new(crate::bundled::agent_roster(&registry)?);
        Ok(Self { registry, invoker, llm, library: Arc::new(library), roster, config: DiagnosisConfig::default() })
    }

    pub fn with_config(mut self, config: DiagnosisConfig) -> Self {
        self.config = config;
        self
    }

    pub fn start(&self, alert: &str) -> Result<DiagnosisRun, DiagError> {
        let id = format!("diag-{:016x}", fnv1a64(alert.trim().as_bytes()));
        DiagnosisRun::start(self, &id, alert)
    }

    /// Start and drive to completion; a parameter request is an error here.
    pub fn run_diagnosis(&self, alert: &str) -> Result<DiagnosisRun, DiagError> {
        let mut run = self.start(alert)?;
        run.advance(self)?;
        Ok(run)
    }
}

pub const REFLECT_PROMPT: &str = "REFLECT\nExpert: {expert}\nTask: {task}\nTool: {tool}\nResult: {result}\n\
Decide whether the result concludes the task. Reply with exactly one line: \
CONCLUDED: <finding> (optionally followed by | ROOT_CAUSE: <cause> | RECOMMEND: <action>), \
NEEDS_MORE: <what to check next>, or HANDOFF <agent name>: <message>.";

#[derive(Debug, Clone, PartialEq)]
pub enum Reflection {
    Concluded { finding: String, root_cause: Option<(String, String)> },
    NeedsMore(String),
    Handoff { to: String, message: String },
}

/// Read the first line that follows the reflection grammar; anything else
/// counts as a conclusion with the tool text as the finding.
pub fn parse_reflection(reply: &str, fallback: &str) -> Reflection {
    for line in reply.lines().map(str::trim) {
        if let Some(rest) = line.strip_prefix("CONCLUDED:") {
            let mut parts = rest.split('|').map(str::trim);
            let finding = parts.next().unwrap_or_default().to_string();
            let (mut cause, mut rec) = (None, None);
            for p in parts {
                if let Some(c) = p.strip_prefix("ROOT_CAUSE:") {
                    cause = Some(c.trim().to_string());
                } else if let Some(r) = p.strip_prefix("RECOMMEND:") {
                    rec = Some(r.trim().to_string());
                }
            }
            let root_cause = cause.map(|c| (c, rec.unwrap_or_else(|| "Review the evidence with the owning team.".into())));
            return Reflection::Concluded { finding: if finding.is_empty() { fallback.to_string() } else { finding }, root_cause };
        }
        if let Some(rest) = line.strip_prefix("NEEDS_MORE:") {
            return Reflection::NeedsMore(rest.trim().to_string());
        }
        if let Some(rest) = line.strip_prefix("HANDOFF") {
            if let Some((to, msg)) = rest.split_once(':') {
                return Reflection::Handoff { to: to.trim().to_string(), message: msg.trim().to_string() };
            }
        }
    }
    Reflection::Concluded { finding: fallback.to_string(), root_cause: None }
}

/// One diagnosis, resumable across parameter requests.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosisRun {
    pub run_id: String,
    pub alert: String,
    pub state: RunState,
    pub round: usize,
    #[serde(skip)]
    cursor: usize,
    #[serde(skip)]
    pub(super) tree_match: Option<TreeMatch>,
    #[serde(skip)]
    pub(super) traversal: Option<Traversal>,
    pub(super) experts: Vec<ExpertState>,
    pub events: Vec<TraceEvent>,
    pub evidence: Vec<Evidence>,
    pub tool_calls: Vec<ToolCallRecord>,
    pub messages: Vec<CrossReviewMessage>,
    pub(super) root_causes: Vec<RootCause>,
    pub session_values: ArgMap,
    #[serde(skip)]
    next_task: usize,
    #[serde(skip)]
    tree_tasks: Vec<String>,
    pub round_limit_hit: bool,
    pub report: Option<DiagnosisReport>,
}

impl DiagnosisRun {
    pub fn start(engine: &DiagnosisEngine, run_id: &str, alert: &str) -> Result<Self, DiagError> {
        let alert = alert.trim();
        if alert.is_empty() {
            return Err(DiagError::EmptyAlert);
        }
        let mut run = Self {
            run_id: run_id.into(),
            alert: alert.into(),
            state: RunState::Active,
            round: 0,
            cursor: 0,
            tree_match: None,
            traversal: None,
            experts: Vec::new(),
            events: Vec::new(),
            evidence: Vec::new(),
            tool_calls: Vec::new(),
            messages: Vec::new(),
            root_causes: Vec::new(),
            session_values: ArgMap::new(),
            next_task: 0,
            tree_tasks: Vec::new(),
            round_limit_hit: false,
            report: None,
        };
        match engine.library.match_tree(alert) {
            Ok(m) => {
                let cases: Vec<&str> = m.cases.iter().map(|c| c.case_id.as_str()).collect();
                run.log(super::CHIEF_ID, "tree_matched", format!("{} (score {:.3}); history {cases:?}", m.tree.tree_id, m.score), None);
                run.traversal = Some(Traversal::new(m.tree.clone(), &m.expanded_alert));
                run.tree_match = Some(m);
            }
            Err(TreeError::NoTreeMatched) => {
                run.log(super::CHIEF_ID, "no_tree_matched", "falling back to free exploration".into(), None);
            }
            Err(e) => return Err(e.into()),
        }
        let mut recruits: Vec<AgentProfile> = engine.roster.assign_experts(alert, engine.config.experts_k).into_iter().cloned().collect();
        if let Some(root_tool) = run.traversal.as_ref().and_then(|t| t.tree().root_node().tool_name.clone()) {
            if !recruits.iter().any(|p| p.may_use(&root_tool)) {
                recruits.insert(0, engine.roster.owner_of(&root_tool).clone());
            }
        }
        let tree = run.tree_match.as_ref().map(|m| m.tree.clone());
        let docs: Vec<String> = run.tree_match.iter().flat_map(|m| m.cases.iter().map(|c| c.diagnosis.clone())).collect();
        for profile in recruits {
            let tasks = decompose_tasks(alert, &profile, tree.as_deref(), &docs, Some(engine.llm.as_ref()))?;
            let idx = run.recruit(&profile, "assigned by the DBA Chief");
            for t in tasks {
                run.enqueue(idx, t);
            }
        }
        Ok(run)
    }

    pub fn is_done(&self) -> bool {
        self.state == RunState::Done
    }

    pub fn pending_params(&self) -> Option<&[ParamSpec]> {
        match &self.state {
            RunState::AwaitingParams { pending_params, .. } => Some(pending_params),
            _ => None,
        }
    }

    pub fn recruited(&self) -> Vec<&AgentProfile> {
        self.experts.iter().map(|e| &e.profile).collect()
    }

    pub fn traversal(&self) -> Option<&Traversal> {
        self.traversal.as_ref()
    }

    pub fn tree_id(&self) -> Option<&str> {
        self.tree_match.as_ref().map(|m| m.tree.tree_id.as_str())
    }

    fn log(&mut self, agent: &str, kind: &str, detail: String, task_id: Option<String>) {
        let seq = self.events.len() + 1;
        self.events.push(TraceEvent { seq, round: self.round, agent: agent.into(), kind: kind.into(), detail, task_id });
    }

    fn recruit(&mut self, profile: &AgentProfile, why: &str) -> usize {
        if let Some(i) = self.experts.iter().position(|e| e.profile.agent_id == profile.agent_id) {
            return i;
        }
        self.experts.push(ExpertState {
            profile: profile.clone(),
            queue: VecDeque::new(),
            finished: Vec::new(),
            started: 0,
            findings: Vec::new(),
            invoked: BTreeSet::new(),
        });
        self.log(super::CHIEF_ID, "recruited", format!("{}: {why}", profile.name), None);
        self.experts.len() - 1
    }

    fn enqueue(&mut self, expert: usize, mut task: DiagnosisTask) {
        self.next_task += 1;
        task.task_id = format!("T{:02}", self.next_task);
        task.assignee = self.experts[expert].profile.agent_id.clone();
        task.status = TaskStatus::Pending;
        let agent = task.assignee.clone();
        self.log(&agent, "task_created", task.instruction.clone(), Some(task.task_id.clone()));
        self.experts[expert].queue.push_back(task);
    }

    fn node_queued(&self, node_id: &str) -> bool {
        self.experts.iter().any(|e| e.queue.iter().any(|t| t.node_id.as_deref() == Some(node_id)))
    }

    /// Deliver a cross-review message, recruiting the recipient if needed.
    pub fn cross_review(&mut self, roster: &AgentRoster, message: CrossReviewMessage) -> Result<(), DiagError> {
        if message.from_agent == message.to_agent {
            return Err(DiagError::SelfReview(message.from_agent));
        }
        let to = roster.get(&message.to_agent).ok_or_else(|| DiagError::UnknownAgent(message.to_agent.clone()))?.clone();
        let from_name = roster.get(&message.from_agent).map_or(message.from_agent.clone(), |p| p.name.clone());
        let idx = self.recruit(&to, &format!("recommended by {from_name}"));
        self.log(&message.from_agent, "cross_review", format!("to {}: {}", to.name, message.payload), None);
        for t in message.suggested_tasks.clone() {
            self.enqueue(idx, t);
        }
        self.messages.push(message);
        Ok(())
    }

    /// Supply parameter values and continue.
    pub fn resume(&mut self, engine: &DiagnosisEngine, values: ArgMap) -> Result<(), DiagError> {
        self.resume_observed(engine, values, &mut |_| {})
    }

    pub fn resume_observed(
        &mut self,
        engine: &DiagnosisEngine,
        values: ArgMap,
        observer: &mut dyn FnMut(&DiagnosisRun),
    ) -> Result<(), DiagError> {
        if !matches!(self.state, RunState::AwaitingParams { .. }) {
            return Err(DiagError::NotAwaitingParams);
        }
        let names: Vec<&String> = values.keys().collect();
        let detail = format!("values for {names:?}");
        self.session_values.extend(values);
        self.state = RunState::Active;
        self.log("user", "resumed", detail, None);
        self.advance_observed(engine, observer)
    }

    /// Run rounds until the queues drain, the round limit hits, or a tool needs parameters.
    pub fn advance(&mut self, engine: &DiagnosisEngine) -> Result<(), DiagError> {
        self.advance_observed(engine, &mut |_| {})
    }

    /// `advance`, calling `observer` after every expert step.
    pub fn advance_observed(&mut self, engine: &DiagnosisEngine, observer: &mut dyn FnMut(&DiagnosisRun)) -> Result<(), DiagError> {
        while self.state == RunState::Active {
            if self.round >= engine.config.round_limit {
                self.round_limit_hit = self.experts.iter().any(|e| !e.queue.is_empty()) || self.round == 0;
                if self.round_limit_hit {
                    self.log(super::CHIEF_ID, "round_limit", format!("stopped after {} rounds", self.round), None);
                }
                self.finish(engine);
                break;
            }
            if self.cursor == 0 && self.experts.iter().all(|e| e.queue.is_empty()) {
                self.finish(engine);
                break;
            }
            if self.cursor >= self.experts.len() {
                self.cursor = 0;
                self.round += 1;
                continue;
            }
            let i = self.cursor;
            if self.experts[i].queue.is_empty() {
                self.cursor += 1;
                continue;
            }
            if self.experts[i].started >= engine.config.task_cap {
                let dropped: Vec<DiagnosisTask> = self.experts[i].queue.drain(..).collect();
                let agent = self.experts[i].profile.agent_id.clone();
                for mut t in dropped {
                    t.advance(TaskStatus::Running);
                    t.advance(TaskStatus::Done);
                    self.log(&agent, "task_skipped", "per-expert task cap reached".into(), Some(t.task_id.clone()));
                    self.experts[i].finished.push(t);
                }
                self.cursor += 1;
                continue;
            }
            let mut task = self.experts[i].queue.pop_front().expect("queue checked non-empty");
            if task.status == TaskStatus::Pending {
                task.advance(TaskStatus::Running);
                self.experts[i].started += 1;
                self.log(&task.assignee.clone(), "task_started", task.instruction.clone(), Some(task.task_id.clone()));
            }
            let outcome = self.expert_step(engine, i, &task)?;
            self.apply_outcome(engine, i, task, outcome)?;
            observer(self);
            if self.state != RunState::Active {
                break;
            }
            self.cursor += 1;
        }
        Ok(())
    }

    fn apply_outcome(
        &mut self,
        engine: &DiagnosisEngine,
        i: usize,
        mut task: DiagnosisTask,
        outcome: StepOutcome,
    ) -> Result<(), DiagError> {
        let agent = self.experts[i].profile.agent_id.clone();
        match outcome {
            StepOutcome::Paused { tool_name, missing } => {
                let names: Vec<&str> = missing.iter().map(|p| p.name.as_str()).collect();
                self.log(&agent, "awaiting_params", format!("{tool_name} needs {names:?}"), Some(task.task_id.clone()));
                self.state = RunState::AwaitingParams { task_id: task.task_id.clone(), tool_name, pending_params: missing };
                self.experts[i].queue.push_front(task);
            }
            StepOutcome::Concluded(finding) => {
                self.log(&agent, "concluded", finding.clone(), Some(task.task_id.clone()));
                self.experts[i].findings.push(finding);
                task.advance(TaskStatus::Done);
                self.experts[i].finished.push(task);
            }
            StepOutcome::NeedsMore(hint) => {
                self.log(&agent, "needs_more", hint.clone(), Some(task.task_id.clone()));
                if task.retries < engine.config.max_retries && task.node_id.is_none() {
                    let follow_up = DiagnosisTask {
                        task_id: String::new(),
                        assignee: agent.clone(),
                        instruction: format!("{} (follow-up: {hint})", task.instruction),
                        status: TaskStatus::Pending,
                        node_id: None,
                        retries: task.retries + 1,
                    };
                    self.enqueue(i, follow_up);
                }
                task.advance(TaskStatus::Done);
                self.experts[i].finished.push(task);
            }
            StepOutcome::Handoff(message) => {
                task.advance(TaskStatus::HandedOff);
                self.experts[i].finished.push(task);
                match self.cross_review(&engine.roster, message) {
                    Ok(()) => {}
                    Err(e @ (DiagError::SelfReview(_) | DiagError::UnknownAgent(_))) => {
                        self.log(&agent, "cross_review_rejected", e.to_string(), None);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }

    fn context_text(&self) -> String {
        let mut text = self.alert.clone();
        for e in &self.evidence {
            text.push('\n');
            text.push_str(&e.normalized_text);
        }
        text
    }

    fn record_call(&mut self, i: usize, task: &DiagnosisTask, call: &ToolCall, result: &ToolResult) {
        let agent = self.experts[i].profile.agent_id.clone();
        assert!(self.experts[i].profile.may_use(&call.tool_name), "{agent} may not run {}", call.tool_name);
        self.experts[i].invoked.insert(call.tool_name.clone());
        self.log(&agent, "tool_invoked", format!("{} -> {}", call.tool_name, result.normalized_text), Some(task.task_id.clone()));
        self.tool_calls.push(ToolCallRecord {
            task_id: task.task_id.clone(),
            agent_id: agent.clone(),
            call: call.clone(),
            status: result.status,
        });
        self.evidence.push(Evidence {
            evidence_id: format!("E{:02}", self.evidence.len() + 1),
            task_id: task.task_id.clone(),
            agent_id: agent,
            tool_name: call.tool_name.clone(),
            normalized_text: result.normalized_text.clone(),
            metrics: result.metrics.clone(),
        });
    }

    fn reflect(&mut self, engine: &DiagnosisEngine, i: usize, task: &DiagnosisTask, tool: &str, result: &ToolResult) -> Reflection {
        let prompt = REFLECT_PROMPT
            .replace("{expert}", &self.experts[i].profile.name)
            .replace("{task}", &task.instruction)
            .replace("{tool}", tool)
            .replace("{result}", &result.normalized_text);
        let reply = ask(engine.llm.as_ref(), &prompt).unwrap_or_default();
        let r = parse_reflection(&reply, &result.normalized_text);
        let agent = self.experts[i].profile.agent_id.clone();
        self.log(&agent, "reflection", reply.lines().next().unwrap_or_default().to_string(), Some(task.task_id.clone()));
        r
    }

    fn expert_step(&mut self, engine: &DiagnosisEngine, i: usize, task: &DiagnosisTask) -> Result<StepOutcome, DiagError> {
        match task.node_id.clone() {
            Some(node_id) => self.tree_step(engine, i, task, &node_id),
            None => self.free_step(engine, i, task),
        }
    }

    fn tree_step(&mut self, engine: &DiagnosisEngine, i: usize, task: &DiagnosisTask, node_id: &str) -> Result<StepOutcome, DiagError> {
        let mut traversal = self.traversal.take().expect("tree tasks exist only with a traversal");
        let outcome = self.tree_step_inner(engine, i, task, node_id, &mut traversal);
        self.traversal = Some(traversal);
        outcome
    }

    fn tree_step_inner(
        &mut self,
        engine: &DiagnosisEngine,
        i: usize,
        task: &DiagnosisTask,
        node_id: &str,
        traversal: &mut Traversal,
    ) -> Result<StepOutcome, DiagError> {
        let on_path = traversal.current_node().is_some_and(|n| n.node_id == node_id);
        if !on_path {
            return Ok(StepOutcome::Concluded(format!("branch through {node_id} not taken")));
        }
        let node = traversal.current_node().expect("checked on path").clone();
        let tool = node.tool_name.clone().expect("non-leaf nodes carry a tool");
        if !self.experts[i].profile.may_use(&tool) {
            let owner = engine.roster.owner_of(&tool).agent_id.clone();
            return Ok(StepOutcome::Handoff(CrossReviewMessage {
                from_agent: self.experts[i].profile.agent_id.clone(),
                to_agent: owner,
                payload: format!("{tool} is outside my tools"),
                suggested_tasks: vec![task_for_node(&node)],
            }));
        }
        let session_id = self.run_id.clone();
        let values = self.session_values.clone();
        let env = StepEnv {
            registry: &engine.registry,
            invoker: engine.invoker.as_ref(),
            llm: Some(engine.llm.as_ref()),
            session_id: &session_id,
            session_values: &values,
        };
        let call = match traversal.prepare_call(&env)? {
            Ok(call) => call,
            Err(missing) => return Ok(StepOutcome::Paused { tool_name: tool, missing }),
        };
        let result = engine.registry.invoke(call.clone(), engine.invoker.as_ref())?;
        self.record_call(i, task, &call, &result);
        self.tree_tasks.push(task.task_id.clone());
        traversal.record(call, result.clone())?;
        let finding = match self.reflect(engine, i, task, &tool, &result) {
            Reflection::Concluded { finding, .. } => finding,
            Reflection::NeedsMore(h) => h,
            Reflection::Handoff { message, .. } => message,
        };
        if let Some(conclusion) = traversal.trace().conclusion.clone() {
            let tree = traversal.tree().clone();
            let path: Vec<&str> = traversal.trace().steps.iter().map(|s| s.node_id.as_str()).collect();
            let mut evidence: Vec<String> = Vec::new();
            for t in &self.tree_tasks {
                if !evidence.contains(t) {
                    evidence.push(t.clone());
                }
            }
            self.root_causes.push(RootCause {
                cause: conclusion.cause.clone(),
                confidence_note: format!("Confirmed by the {} diagnosis tree along {}", tree.title, path.join(" -> ")),
                recommendation: conclusion.recommendation.clone(),
                family: conclusion.family,
                evidence_task_ids: evidence,
            });
            self.log(&self.experts[i].profile.agent_id.clone(), "tree_concluded", conclusion.cause, Some(task.task_id.clone()));
            return Ok(StepOutcome::Concluded(finding));
        }
        let next = traversal.current_node().expect("not concluded").clone();
        if self.node_queued(&next.node_id) {
            return Ok(StepOutcome::Concluded(finding));
        }
        let next_tool = next.tool_name.clone().expect("non-leaf");
        if self.experts[i].profile.may_use(&next_tool) {
            self.enqueue(i, task_for_node(&next));
            return Ok(StepOutcome::Concluded(finding));
        }
        let owner = self
            .experts
            .iter()
            .map(|e| &e.profile)
            .find(|p| p.may_use(&next_tool))
            .unwrap_or_else(|| engine.roster.owner_of(&next_tool))
            .agent_id
            .clone();
        Ok(StepOutcome::Handoff(CrossReviewMessage {
            from_agent: self.experts[i].profile.agent_id.clone(),
            to_agent: owner,
            payload: finding,
            suggested_tasks: vec![task_for_node(&next)],
        }))
    }

    fn free_step(&mut self, engine: &DiagnosisEngine, i: usize, task: &DiagnosisTask) -> Result<StepOutcome, DiagError> {
        let expert = self.experts[i].profile.clone();
        let allowed: Vec<String> = expert.allowed_tools.iter().filter(|t| !self.experts[i].invoked.contains(*t)).cloned().collect();
        let query = format!("{}\n{}", task.instruction, self.alert);
        let context = format!("{}\n{}", task.instruction, self.context_text());
        let mut chosen = None;
        for tool in engine.registry.select_among(&query, allowed.len(), Some(&allowed)) {
            if let FillOutcome::Bound(arguments) = fill_parameters(tool, &context, &self.session_values, Some(engine.llm.as_ref()))? {
                chosen = Some(ToolCall { tool_name: tool.name.clone(), arguments, session_id: self.run_id.clone() });
                break;
            }
        }
        let Some(call) = chosen else {
            return Ok(StepOutcome::NeedsMore(format!("no applicable tool among {} candidates", allowed.len())));
        };
        let result = engine.registry.invoke(call.clone(), engine.invoker.as_ref())?;
        self.record_call(i, task, &call, &result);
        if result.status == ToolStatus::Error {
            return Ok(StepOutcome::NeedsMore(result.normalized_text));
        }
        match self.reflect(engine, i, task, &call.tool_name, &result) {
            Reflection::Concluded { finding, root_cause } => {
                if let Some((cause, recommendation)) = root_cause {
                    self.root_causes.push(RootCause {
                        cause,
                        confidence_note: format!("Reported by {} after {}", expert.name, call.tool_name),
                        recommendation,
                        family: crate::diag_agents::report::family_for_text(&format!("{} {}", self.alert, finding)),
                        evidence_task_ids: vec![task.task_id.clone()],
                    });
                }
                Ok(StepOutcome::Concluded(finding))
            }
            Reflection::NeedsMore(h) => Ok(StepOutcome::NeedsMore(h)),
            Reflection::Handoff { to, message } => {
                let to_agent = engine.roster.resolve(&to).map_or(to.clone(), |p| p.agent_id.clone());
                Ok(StepOutcome::Handoff(CrossReviewMessage {
                    from_agent: expert.agent_id.clone(),
                    to_agent,
                    payload: message.clone(),
                    suggested_tasks: vec![DiagnosisTask {
                        task_id: String::new(),
                        assignee: String::new(),
                        instruction: message,
                        status: TaskStatus::Pending,
                        node_id: None,
                        retries: 0,
                    }],
                }))
            }
        }
    }

    fn finish(&mut self, engine: &DiagnosisEngine) {
        self.log(super::CHIEF_ID, "finished", format!("{} root causes", self.root_causes.len()), None);
        self.report = Some(aggregate(self, engine.llm.as_ref()));
        self.state = RunState::Done;
    }
}

fn task_for_node(node: &crate::diagtree::TreeNode) -> DiagnosisTask {
    DiagnosisTask {
        task_id: String::new(),
        assignee: String::new(),
        instruction: node.display_title(),
        status: TaskStatus::Pending,
        node_id: Some(node.node_id.clone()),
        retries: 0,
    }
}
