//! Diagnosis trees: runbooks whose nodes bind tools and whose edges branch
//! on tool results.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::kb_ingest::{Chunk, KnowledgeBase};
use crate::llm_backend::LlmBackend;
use crate::retrieval::{HybridRetriever, RetrievalConfig};
use crate::tool_registry::{
    fill_parameters, ArgMap, FillOutcome, ParamSpec, ToolCall, ToolError, ToolInvoker, ToolRegistry, ToolResult, ToolStatus,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree file: {0}")]
    Parse(String),
    #[error("cycle through node {0}")]
    CycleDetected(String),
    #[error("node {0} has no final `always` edge")]
    MissingCatchAll(String),
    #[error("node {node}: malformed predicate: {message}")]
    MalformedPredicate { node: String, message: String },
    #[error("node {node}: {reason}")]
    Invalid { node: String, reason: String },
    #[error("node {node} uses unregistered tool {tool}")]
    UnknownTool { node: String, tool: String },
    #[error("no diagnosis tree matches the alert")]
    NoTreeMatched,
    #[error(transparent)]
    Tool(#[from] ToolError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    Always,
    StatusOk,
    StatusError,
    FieldEquals { path: String, value: Value },
    FieldGt { path: String, threshold: f64 },
    Contains { text: String },
}

/// Slash-delimited lookup; a leading slash is optional.
pub fn lookup<'a>(raw: &'a Value, path: &str) -> Option<&'a Value> {
    if path.is_empty() || path == "/" {
        return Some(raw);
    }
    if path.starts_with('/') {
        raw.pointer(path)
    } else {
        raw.pointer(&format!("/{path}"))
    }
}

impl Predicate {
    pub fn evaluate(&self, result: &ToolResult) -> bool {
        match self {
            Predicate::Always => true,
            Predicate::StatusOk => result.status == ToolStatus::Ok,
            Predicate::StatusError => result.status == ToolStatus::Error,
            Predicate::FieldEquals { path, value } => lookup(&result.raw, path) == Some(value),
            Predicate::FieldGt { path, threshold } => lookup(&result.raw, path).and_then(Value::as_f64).is_some_and(|v| v > *threshold),
            Predicate::Contains { text } => result.normalized_text.to_lowercase().contains(&text.to_lowercase()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootCauseFamily {
    Cpu,
    Io,
    Lock,
    SlowSql,
    Other,
}

impl RootCauseFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cpu => "cpu",
            Self::Io => "io",
            Self::Lock => "lock",
            Self::SlowSql => "slow_sql",
            Self::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConclusionTemplate {
    pub cause: String,
    pub recommendation: String,
    #[serde(default = "other_family")]
    pub family: RootCauseFamily,
}

fn other_family() -> RootCauseFamily {
    RootCauseFamily::Other
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub condition: Predicate,
    pub child: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    #[serde(skip_deserializing)]
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    /// Literal values, or `"$node_id:path"` references into an earlier result.
    #[serde(default)]
    pub argument_hints: BTreeMap<String, Value>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conclusion: Option<ConclusionTemplate>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn display_title(&self) -> String {
        self.title.clone().unwrap_or_else(|| match &self.tool_name {
            Some(t) => format!("Run {t}"),
            None => self.node_id.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisTree {
    pub tree_id: String,
    pub title: String,
    pub description: String,
    pub root: String,
    pub nodes: BTreeMap<String, TreeNode>,
}

#[derive(Deserialize)]
struct TreeFile {
    tree_id: String,
    title: String,
    description: String,
    root: String,
    nodes: BTreeMap<String, Value>,
}

impl DiagnosisTree {
    /// Parse and structurally validate a tree document.
    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let file: TreeFile = serde_json::from_str(text).map_err(|e| TreeError::Parse(e.to_string()))?;
        let mut nodes = BTreeMap::new();
        for (id, raw) in file.nodes {
            if let Some(edges) = raw.get("edges").and_then(Value::as_array) {
                for e in edges {
                    let cond = e.get("condition").cloned().unwrap_or(Value::Null);
                    serde_json::from_value::<Predicate>(cond)
                        .map_err(|err| TreeError::MalformedPredicate { node: id.clone(), message: err.to_string() })?;
                }
            }
            let mut node: TreeNode = serde_json::from_value(raw).map_err(|e| TreeError::Parse(format!("node {id}: {e}")))?;
            node.node_id = id.clone();
            nodes.insert(id, node);
        }
        let tree = Self { tree_id: file.tree_id, title: file.title, description: file.description, root: file.root, nodes };
        tree.validate()?;
        Ok(tree)
    }

    pub fn node(&self, id: &str) -> Option<&TreeNode> {
        self.nodes.get(id)
    }

    pub fn root_node(&self) -> &TreeNode {
        &self.nodes[&self.root]
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        let invalid = |node: &str, reason: &str| TreeError::Invalid { node: node.into(), reason: reason.into() };
        if !self.nodes.contains_key(&self.root) {
            return Err(invalid(&self.root, "root node is not defined"));
        }
        for (id, n) in &self.nodes {
            for e in &n.edges {
                if !self.nodes.contains_key(&e.child) {
                    return Err(invalid(id, &format!("edge to undefined node {}", e.child)));
                }
            }
            match (n.is_leaf(), n.conclusion.is_some()) {
                (true, false) => return Err(invalid(id, "leaf without conclusion")),
                (false, true) => return Err(invalid(id, "conclusion on a node with edges")),
                _ => {}
            }
            if n.is_leaf() {
                if n.tool_name.is_some() {
                    return Err(invalid(id, "leaf nodes do not run tools"));
                }
            } else {
                if n.tool_name.is_none() {
                    return Err(invalid(id, "non-leaf node without tool_name"));
                }
                if n.edges.last().map(|e| &e.condition) != Some(&Predicate::Always) {
                    return Err(TreeError::MissingCatchAll(id.clone()));
                }
            }
        }
        // iterative DFS with colors
        let mut state: HashMap<&str, u8> = HashMap::new();
        let mut stack: Vec<(&str, usize)> = vec![(self.root.as_str(), 0)];
        state.insert(&self.root, 1);
        while let Some((id, next)) = stack.pop() {
            let node = &self.nodes[id];
            if let Some(edge) = node.edges.get(next) {
                stack.push((id, next + 1));
                match state.get(edge.child.as_str()) {
                    Some(1) => return Err(TreeError::CycleDetected(edge.child.clone())),
                    Some(_) => {}
                    None => {
                        state.insert(&edge.child, 1);
                        stack.push((&edge.child, 0));
                    }
                }
            } else {
                state.insert(id, 2);
            }
        }
        if let Some(orphan) = self.nodes.keys().find(|k| !state.contains_key(k.as_str())) {
            return Err(invalid(orphan, "not reachable from root"));
        }
        Ok(())
    }

    pub fn validate_against(&self, registry: &ToolRegistry) -> Result<(), TreeError> {
        for n in self.nodes.values() {
            if let Some(tool) = &n.tool_name {
                let Some(desc) = registry.get(tool) else {
                    return Err(TreeError::UnknownTool { node: n.node_id.clone(), tool: tool.clone() });
                };
                if let Some(bad) = n.argument_hints.keys().find(|k| desc.param(k).is_none()) {
                    return Err(TreeError::Invalid { node: n.node_id.clone(), reason: format!("hint for unknown parameter {bad}") });
                }
            }
        }
        Ok(())
    }

    /// Longest path length in nodes.
    pub fn depth(&self) -> usize {
        fn go(t: &DiagnosisTree, id: &str) -> usize {
            1 + t.nodes[id].edges.iter().map(|e| go(t, &e.child)).max().unwrap_or(0)
        }
        go(self, &self.root)
    }

    /// Path predicted by always taking the first edge.
    pub fn first_edge_path(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        let mut cur = self.root_node();
        loop {
            out.push(cur);
            match cur.edges.first() {
                Some(e) => cur = &self.nodes[&e.child],
                None => return out,
            }
        }
    }

    fn selection_text(&self) -> String {
        format!("{} {}", self.title, self.description)
    }
}

pub fn load_tree(path: &Path) -> Result<DiagnosisTree, TreeError> {
    let text = std::fs::read_to_string(path).map_err(|e| TreeError::Parse(format!("{}: {e}", path.display())))?;
    DiagnosisTree::from_json(&text)
}

/// Every `*.tree.json` under `dir`, sorted by file name.
pub fn load_tree_dir(dir: &Path) -> Result<Vec<DiagnosisTree>, TreeError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| TreeError::Parse(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".tree.json")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_tree(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalCase {
    pub case_id: String,
    pub alert: String,
    pub diagnosis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_id: Option<String>,
}

pub fn parse_history(jsonl: &str) -> Result<Vec<HistoricalCase>, TreeError> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| TreeError::Parse(format!("history line {}: {e}", i + 1))))
        .collect()
}

fn index_of(items: impl Iterator<Item = (String, String)>) -> HybridRetriever {
    let chunks: Vec<Chunk> = items.map(|(id, text)| Chunk::new(id, text, String::new(), Vec::new(), "library".into())).collect();
    let n = chunks.len().max(1);
    HybridRetriever::new(Arc::new(KnowledgeBase::from_chunks(chunks)))
        .with_config(RetrievalConfig { candidate_depth: n, neighbor_radius: 0 })
}

pub const HISTORY_EXPANSION: usize = 2;

/// Trees and past cases with retrieval indices over both.
#[derive(Debug)]
pub struct TreeLibrary {
    trees: Vec<Arc<DiagnosisTree>>,
    history: Vec<HistoricalCase>,
    tree_index: HybridRetriever,
    history_index: HybridRetriever,
}

#[derive(Debug, Clone)]
pub struct TreeMatch {
    pub tree: Arc<DiagnosisTree>,
    pub cases: Vec<HistoricalCase>,
    pub expanded_alert: String,
    pub score: f64,
}

impl TreeLibrary {
    pub fn new(trees: Vec<DiagnosisTree>, history: Vec<HistoricalCase>) -> Self {
        let tree_index = index_of(trees.iter().map(|t| (t.tree_id.clone(), t.selection_text())));
        let history_index = index_of(history.iter().map(|c| (c.case_id.clone(), c.alert.clone())));
        Self { trees: trees.into_iter().map(Arc::new).collect(), history, tree_index, history_index }
    }

    pub fn trees(&self) -> &[Arc<DiagnosisTree>] {
        &self.trees
    }

    pub fn tree(&self, id: &str) -> Option<&Arc<DiagnosisTree>> {
        self.trees.iter().find(|t| t.tree_id == id)
    }

    pub fn validate_against(&self, registry: &ToolRegistry) -> Result<(), TreeError> {
        self.trees.iter().try_for_each(|t| t.validate_against(registry))
    }

    /// Expand the alert with the closest past alerts, then pick the tree whose
    /// title and description best match the alert and its expansion.
    pub fn match_tree(&self, alert: &str) -> Result<TreeMatch, TreeError> {
        let cases: Vec<HistoricalCase> = self
            .history_index
            .retrieve(alert, HISTORY_EXPANSION)
            .unwrap_or_default()
            .iter()
            .filter_map(|s| self.history.iter().find(|c| c.case_id == s.chunk_id).cloned())
            .collect();
        let mut expanded = alert.to_string();
        for c in &cases {
            expanded.push('\n');
            expanded.push_str(&c.alert);
        }
        // Rerank against the raw alert so past cases widen recall without outvoting it.
        let best = self.tree_index.retrieve_traced(&[alert.to_string(), expanded.clone()], 1).map(|t| t.results).unwrap_or_default();
        let top = best.first().ok_or(TreeError::NoTreeMatched)?;
        let tree = self.tree(&top.chunk_id).cloned().ok_or(TreeError::NoTreeMatched)?;
        Ok(TreeMatch { tree, cases, expanded_alert: expanded, score: top.score })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraversalStep {
    pub node_id: String,
    pub call: ToolCall,
    pub result: ToolResult,
    pub chosen_edge_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conclusion {
    pub node_id: String,
    pub cause: String,
    pub recommendation: String,
    pub family: RootCauseFamily,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TraversalTrace {
    pub tree_id: String,
    pub steps: Vec<TraversalStep>,
    pub conclusion: Option<Conclusion>,
}

impl TraversalTrace {
    pub fn result_of(&self, node_id: &str) -> Option<&ToolResult> {
        self.steps.iter().find(|s| s.node_id == node_id).map(|s| &s.result)
    }
}

/// What a traversal needs from its surroundings for one step.
pub struct StepEnv<'a> {
    pub registry: &'a ToolRegistry,
    pub invoker: &'a dyn ToolInvoker,
    pub llm: Option<&'a dyn LlmBackend>,
    pub session_id: &'a str,
    /// Values supplied by the user; they override tree hints.
    pub session_values: &'a ArgMap,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepStatus {
    Stepped,
    Concluded,
    NeedParams { node_id: String, tool_name: String, missing: Vec<ParamSpec> },
}

static TEMPLATE_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\$\{([A-Za-z0-9_\-]+):([^}]*)\}").expect("valid template regex"));

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Substitute `${node_id:path}` with values from the trace.
pub fn render_template(template: &str, trace: &TraversalTrace) -> String {
    TEMPLATE_REF
        .replace_all(template, |c: &regex::Captures| {
            trace.result_of(&c[1]).and_then(|r| lookup(&r.raw, &c[2])).map(render_value).unwrap_or_else(|| "unknown".into())
        })
        .into_owned()
}

/// Resumable walk of one tree; pauses when a tool needs parameters nobody can supply.
#[derive(Debug, Clone)]
pub struct Traversal {
    tree: Arc<DiagnosisTree>,
    alert_context: String,
    current: Option<String>,
    trace: TraversalTrace,
}

impl Traversal {
    pub fn new(tree: Arc<DiagnosisTree>, alert_context: &str) -> Self {
        let trace = TraversalTrace { tree_id: tree.tree_id.clone(), ..Default::default() };
        Self { current: Some(tree.root.clone()), tree, alert_context: alert_context.to_string(), trace }
    }

    pub fn tree(&self) -> &Arc<DiagnosisTree> {
        &self.tree
    }

    pub fn trace(&self) -> &TraversalTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.current.is_none()
    }

    pub fn current_node(&self) -> Option<&TreeNode> {
        self.current.as_deref().and_then(|id| self.tree.node(id))
    }

    /// Alert text followed by every result so far.
    pub fn context_text(&self) -> String {
        let mut text = self.alert_context.clone();
        for s in &self.trace.steps {
            text.push('\n');
            text.push_str(&s.result.normalized_text);
        }
        text
    }

    fn resolved_hints(&self, node: &TreeNode) -> ArgMap {
        let mut out = ArgMap::new();
        for (param, hint) in &node.argument_hints {
            let value = match hint.as_str().and_then(|h| h.strip_prefix('$')) {
                Some(reference) => {
                    let Some((node_id, path)) = reference.split_once(':') else { continue };
                    match self.trace.result_of(node_id).and_then(|r| lookup(&r.raw, path)) {
                        Some(v) if !v.is_null() => v.clone(),
                        _ => continue,
                    }
                }
                None => hint.clone(),
            };
            out.insert(param.clone(), value);
        }
        out
    }

    /// Arguments for the current node: session values over hints, then rules and LLM.
    pub fn prepare_call(&self, env: &StepEnv) -> Result<Result<ToolCall, Vec<ParamSpec>>, TreeError> {
        let node =
            self.current_node().ok_or_else(|| TreeError::Invalid { node: String::new(), reason: "traversal already concluded".into() })?;
        let tool_name = node.tool_name.as_deref().expect("validated: non-leaf has a tool");
        let tool = env.registry.get(tool_name).ok_or_else(|| ToolError::ToolNotFound(tool_name.into()))?;
        let mut known = self.resolved_hints(node);
        for (k, v) in env.session_values {
            if tool.param(k).is_some() {
                known.insert(k.clone(), v.clone());
            }
        }
        match fill_parameters(tool, &self.context_text(), &known, env.llm)? {
            FillOutcome::Bound(arguments) => Ok(Ok(ToolCall { tool_name: tool_name.into(), arguments, session_id: env.session_id.into() })),
            FillOutcome::Missing(m) => Ok(Err(m)),
        }
    }

    /// Record a result for the current node and follow the first matching edge.
    pub fn record(&mut self, call: ToolCall, result: ToolResult) -> Result<(), TreeError> {
        let node =
            self.current_node().ok_or_else(|| TreeError::Invalid { node: String::new(), reason: "traversal already concluded".into() })?;
        let (index, edge) = node
            .edges
            .iter()
            .enumerate()
            .find(|(_, e)| e.condition.evaluate(&result))
            .ok_or_else(|| TreeError::MissingCatchAll(node.node_id.clone()))?;
        let next = edge.child.clone();
        self.trace.steps.push(TraversalStep { node_id: node.node_id.clone(), call, result, chosen_edge_index: index });
        self.current = Some(next);
        self.conclude_if_leaf();
        Ok(())
    }

    fn conclude_if_leaf(&mut self) {
        let Some(node) = self.current_node() else { return };
        if !node.is_leaf() {
            return;
        }
        let tpl = node.conclusion.clone().expect("validated: leaf has a conclusion");
        let node_id = node.node_id.clone();
        self.trace.conclusion = Some(Conclusion {
            node_id,
            cause: render_template(&tpl.cause, &self.trace),
            recommendation: render_template(&tpl.recommendation, &self.trace),
            family: tpl.family,
        });
        self.current = None;
    }

    pub fn step(&mut self, env: &StepEnv) -> Result<StepStatus, TreeError> {
        self.conclude_if_leaf();
        let Some(node) = self.current_node() else {
            return Ok(StepStatus::Concluded);
        };
        let node_id = node.node_id.clone();
        match self.prepare_call(env)? {
            Err(missing) => Ok(StepStatus::NeedParams { node_id, tool_name: node.tool_name.clone().unwrap_or_default(), missing }),
            Ok(call) => {
                let result = env.registry.invoke(call.clone(), env.invoker)?;
                self.record(call, result)?;
                Ok(if self.is_done() { StepStatus::Concluded } else { StepStatus::Stepped })
            }
        }
    }

    /// Step until the tree concludes or a parameter is missing.
    pub fn run(&mut self, env: &StepEnv) -> Result<StepStatus, TreeError> {
        loop {
            match self.step(env)? {
                StepStatus::Stepped => continue,
                other => return Ok(other),
            }
        }
    }
}

/// Walk `tree` from the root; the status says whether it concluded or paused.
pub fn traverse(tree: Arc<DiagnosisTree>, alert_context: &str, env: &StepEnv) -> Result<(Traversal, StepStatus), TreeError> {
    let mut t = Traversal::new(tree, alert_context);
    let status = t.run(env)?;
    Ok((t, status))
}
