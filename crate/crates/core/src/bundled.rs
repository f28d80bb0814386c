//! Assets compiled into the binary so every pipeline runs without a data directory.

use std::collections::HashMap;
use std::sync::Arc;

use serde::Deserialize;

use crate::diag_agents::{AgentRoster, DiagError};
use crate::diagtree::{parse_history, DiagnosisTree, TreeError, TreeLibrary};
use crate::kb_ingest::{build_from_raw, IngestError, KnowledgeBase, RawDocument, SplitConfig};
use crate::llm_backend::{LlmBackend, ScriptedBackend};
use crate::qa_pipeline::{FeedbackLog, QaPipeline};
use crate::retrieval::HybridRetriever;
use crate::router::SynonymTable;
use crate::safety::{ClassifierPatterns, RuleClassifier, SafetyError, SafetyGate, SensitiveLexicon};
use crate::tool_registry::mock_server::{parse_scenarios, ScenarioFile};
use crate::tool_registry::{ToolError, ToolRegistry};

pub const TOOLS_JSON: &str = include_str!("../assets/tools.json");
pub const AGENTS_JSON: &str = include_str!("../assets/agents.json");
pub const SCENARIOS_JSON: &str = include_str!("../assets/scenarios.json");
pub const LEXICON_TXT: &str = include_str!("../assets/lexicon.txt");
pub const CLASSIFIER_JSON: &str = include_str!("../assets/classifier.json");
pub const SYNONYMS_JSON: &str = include_str!("../assets/synonyms.json");
pub const HISTORY_JSONL: &str = include_str!("../assets/history.jsonl");
pub const LLM_SCRIPT_JSON: &str = include_str!("../assets/llm_script.json");

pub const TREES: [(&str, &str); 4] = [
    ("high_cpu.tree.json", include_str!("../assets/trees/high_cpu.tree.json")),
    ("high_io.tree.json", include_str!("../assets/trees/high_io.tree.json")),
    ("lock_contention.tree.json", include_str!("../assets/trees/lock_contention.tree.json")),
    ("slow_query.tree.json", include_str!("../assets/trees/slow_query.tree.json")),
];

pub const CORPUS_META: &str = include_str!("../assets/corpus/_meta.json");

/// The fixture corpus as (relative path, content), sorted by path.
pub const CORPUS: [(&str, &str); 12] = [
    ("backup_restore.md", include_str!("../assets/corpus/backup_restore.md")),
    ("connection_config.md", include_str!("../assets/corpus/connection_config.md")),
    ("faq_general.md", include_str!("../assets/corpus/faq_general.md")),
    ("faq_performance.md", include_str!("../assets/corpus/faq_performance.md")),
    ("index_management.md", include_str!("../assets/corpus/index_management.md")),
    ("isolation_levels.md", include_str!("../assets/corpus/isolation_levels.md")),
    ("partitioning.md", include_str!("../assets/corpus/partitioning.md")),
    ("release_notes.txt", include_str!("../assets/corpus/release_notes.txt")),
    ("slow_sql_tuning.md", include_str!("../assets/corpus/slow_sql_tuning.md")),
    ("user_permissions.md", include_str!("../assets/corpus/user_permissions.md")),
    ("vacuum_guide.md", include_str!("../assets/corpus/vacuum_guide.md")),
    ("wdr_reports.md", include_str!("../assets/corpus/wdr_reports.md")),
];

pub mod eval {
    pub const TOOL_CASES: &str = include_str!("../assets/eval/tool_cases.jsonl");
    pub const ANSWER_CASES: &str = include_str!("../assets/eval/answer_cases.jsonl");
    pub const INTENT_CASES: &str = include_str!("../assets/eval/intent_cases.jsonl");
    pub const CLASSIFIER_CASES: &str = include_str!("../assets/eval/classifier_cases.jsonl");
}

#[derive(Deserialize)]
struct Meta {
    source: String,
    version_tag: String,
}

pub fn corpus_documents() -> Vec<RawDocument> {
    let meta: HashMap<String, Meta> = serde_json::from_str(CORPUS_META).expect("bundled corpus metadata is valid");
    CORPUS
        .iter()
        .map(|(path, content)| {
            let m = &meta[*path];
            let (stem, ext) = path.rsplit_once('.').expect("bundled files have extensions");
            RawDocument {
                doc_id: stem.to_string(),
                format: if ext == "md" { "markdown" } else { "plaintext" }.to_string(),
                source: m.source.clone(),
                version_tag: m.version_tag.clone(),
                content: content.to_string(),
            }
        })
        .collect()
}

pub fn knowledge_base() -> Result<KnowledgeBase, IngestError> {
    build_from_raw(&corpus_documents(), &SplitConfig::default())
}

pub fn tool_registry() -> Result<ToolRegistry, ToolError> {
    ToolRegistry::from_json(TOOLS_JSON)
}

pub fn trees() -> Result<Vec<DiagnosisTree>, TreeError> {
    TREES.iter().map(|(_, t)| DiagnosisTree::from_json(t)).collect()
}

pub fn tree_library() -> Result<TreeLibrary, TreeError> {
    Ok(TreeLibrary::new(trees()?, parse_history(HISTORY_JSONL)?))
}

pub fn scenarios() -> Result<ScenarioFile, ToolError> {
    parse_scenarios(SCENARIOS_JSON)
}

pub fn lexicon() -> Result<SensitiveLexicon, SafetyError> {
    SensitiveLexicon::parse_file(LEXICON_TXT)
}

pub fn classifier() -> Result<RuleClassifier, SafetyError> {
    RuleClassifier::new(&ClassifierPatterns::from_json(CLASSIFIER_JSON)?)
}

pub fn safety_gate() -> Result<SafetyGate, SafetyError> {
    Ok(SafetyGate::new(lexicon()?, Arc::new(classifier()?)))
}

pub fn synonyms() -> SynonymTable {
    crate::router::parse_synonyms(SYNONYMS_JSON).expect("bundled synonym table is valid")
}

pub fn scripted_llm() -> ScriptedBackend {
    ScriptedBackend::from_json(LLM_SCRIPT_JSON).expect("bundled LLM script is valid")
}

pub fn agent_roster(registry: &ToolRegistry) -> Result<AgentRoster, DiagError> {
    AgentRoster::from_json(AGENTS_JSON, registry)
}

/// QA pipeline over the bundled corpus with an in-memory feedback log.
pub fn qa_pipeline(llm: Arc<dyn LlmBackend>) -> Result<QaPipeline, String> {
    let kb = knowledge_base().map_err(|e| e.to_string())?;
    let retriever = Arc::new(HybridRetriever::new(Arc::new(kb)));
    let safety = Arc::new(safety_gate().map_err(|e| e.to_string())?);
    Ok(QaPipeline::new(retriever, llm, safety, synonyms(), Arc::new(FeedbackLog::in_memory())))
}
