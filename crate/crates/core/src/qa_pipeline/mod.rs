//! Safety-gated retrieval-augmented answering.

pub mod feedback;

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::llm_backend::{ChatMessage, LlmBackend, LlmError};
use crate::retrieval::{HybridRetriever, RetrievalError, RetrievalTrace, ScoredChunk};
use crate::router::{decompose, expand_question, SynonymTable, MAX_VARIANTS};
use crate::safety::{safety_prompt, CheckStage, RiskVerdict, SafetyGate, REFUSAL};
use crate::text::fnv1a64;

pub use feedback::{FeedbackLog, FeedbackRecord, Verdict};

pub const PROMPT_VERSION: &str = "qa-v1";
pub const BASE_SYSTEM_PROMPT: &str = "You are a database maintenance copilot. Answer questions about the database \
product accurately and concisely in markdown, using only the supplied context.";
pub const NO_DOCUMENTS_PREAMBLE: &str =
    "_No supporting documents found in the knowledge base; this answer is not grounded in the documentation._";
pub const CONTEXT_CHUNKS: usize = 6;
pub const CONTEXT_CHARS: usize = 6000;

#[derive(Debug, Error)]
pub enum QaError {
    #[error("LLM backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("unknown answer id {0}")]
    UnknownAnswerId(String),
    #[error("feedback log: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QaStage {
    SafetyPre,
    Expand,
    Retrieve,
    Prompt,
    Generate,
    SafetyPost,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: QaStage,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceRef {
    pub chunk_id: String,
    pub score: f64,
    pub source: String,
    pub version_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    pub answer_id: String,
    pub text: String,
    pub sources: Vec<SourceRef>,
    pub refused: bool,
    pub trace: Vec<StageRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalTrace>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<String>,
}

static CITATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([^\[\]\s]+)\]").expect("valid citation regex"));

fn verdict_detail(v: &RiskVerdict) -> String {
    if v.blocked {
        let words: Vec<&str> = v.matched_words.iter().map(|m| m.word.as_str()).collect();
        format!("blocked: words={words:?} label={:?}", v.classifier_label)
    } else {
        "passed".into()
    }
}

/// Keep the best chunks that fit the budget, dropping the lowest-ranked first.
pub fn select_context<'a>(results: &[ScoredChunk], text_of: impl Fn(&str) -> Option<&'a str>) -> Vec<(String, String)> {
    let mut picked: Vec<(String, String)> =
        results.iter().filter_map(|s| text_of(&s.chunk_id).map(|t| (s.chunk_id.clone(), t.to_string()))).take(CONTEXT_CHUNKS).collect();
    while picked.len() > 1 && picked.iter().map(|(_, t)| t.len()).sum::<usize>() > CONTEXT_CHARS {
        picked.pop();
    }
    if let Some((_, t)) = picked.first_mut() {
        if t.len() > CONTEXT_CHARS {
            let mut cut = CONTEXT_CHARS;
            while !t.is_char_boundary(cut) {
                cut -= 1;
            }
            t.truncate(cut);
        }
    }
    picked
}

pub fn build_user_prompt(context: &[(String, String)], question: &str) -> String {
    let mut p = String::from("Context:\n");
    for (id, text) in context {
        p.push_str(&format!("[{id}] {text}\n"));
    }
    p.push_str(&format!("\nQuestion: {question}\nAnswer using only the context; cite chunk ids in square brackets."));
    p
}

#[derive(Clone)]
pub struct QaPipeline {
    retriever: Arc<HybridRetriever>,
    llm: Arc<dyn LlmBackend>,
    safety: Arc<SafetyGate>,
    synonyms: Arc<SynonymTable>,
    feedback: Arc<FeedbackLog>,
    seq: Arc<AtomicU64>,
    k: usize,
}

impl std::fmt::Debug for QaPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QaPipeline").field("retriever", &self.retriever).field("k", &self.k).finish()
    }
}

impl QaPipeline {
    pub fn new(
        retriever: Arc<HybridRetriever>,
        llm: Arc<dyn LlmBackend>,
        safety: Arc<SafetyGate>,
        synonyms: SynonymTable,
        feedback: Arc<FeedbackLog>,
    ) -> Self {
        Self { retriever, llm, safety, synonyms: Arc::new(synonyms), feedback, seq: Arc::new(AtomicU64::new(0)), k: CONTEXT_CHUNKS }
    }

    /// Same pipeline over another index; feedback log and id sequence are shared.
    pub fn with_retriever(&self, retriever: Arc<HybridRetriever>) -> Self {
        Self { retriever, ..self.clone() }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k.max(1);
        self
    }

    pub fn retriever(&self) -> &Arc<HybridRetriever> {
        &self.retriever
    }

    pub fn safety(&self) -> &Arc<SafetyGate> {
        &self.safety
    }

    pub fn feedback(&self) -> &Arc<FeedbackLog> {
        &self.feedback
    }

    pub fn llm(&self) -> &Arc<dyn LlmBackend> {
        &self.llm
    }

    fn next_id(&self, q: &str) -> String {
        let n = self.seq.fetch_add(1, Ordering::SeqCst) + 1;
        format!("ans-{n:06}-{:08x}", fnv1a64(q.as_bytes()) as u32)
    }

    fn refusal(&self, answer_id: String, trace: Vec<StageRecord>, retrieval: Option<RetrievalTrace>, variants: Vec<String>) -> Answer {
        Answer { answer_id, text: REFUSAL.to_string(), sources: Vec::new(), refused: true, trace, retrieval, variants }
    }

    pub fn answer_question(&self, q: &str) -> Result<Answer, QaError> {
        let answer_id = self.next_id(q);
        self.feedback.register_answer(&answer_id);
        let mut trace = Vec::new();

        let pre = self.safety.check(q, CheckStage::PreQuestion);
        trace.push(StageRecord { stage: QaStage::SafetyPre, detail: verdict_detail(&pre) });
        if pre.blocked {
            return Ok(self.refusal(answer_id, trace, None, Vec::new()));
        }

        let mut variants = expand_question(q, &self.synonyms, Some(self.llm.as_ref()));
        let subs = decompose(q, None);
        if subs.len() > 1 {
            variants.extend(subs);
            let mut seen = HashSet::new();
            variants.retain(|v| seen.insert(v.to_lowercase()));
            variants.truncate(MAX_VARIANTS);
        }
        trace.push(StageRecord { stage: QaStage::Expand, detail: format!("{} variants", variants.len()) });

        let retrieval = self.retriever.retrieve_traced(&variants, self.k)?;
        let ids: Vec<&str> = retrieval.results.iter().map(|s| s.chunk_id.as_str()).collect();
        trace.push(StageRecord { stage: QaStage::Retrieve, detail: format!("results={ids:?}") });

        let kb = self.retriever.kb();
        let context = select_context(&retrieval.results, |id| kb.get(id).map(|c| c.text.as_str()));
        let user = build_user_prompt(&context, q);
        let messages = [ChatMessage::system(safety_prompt(BASE_SYSTEM_PROMPT)), ChatMessage::user(user)];
        trace.push(StageRecord {
            stage: QaStage::Prompt,
            detail: format!("{PROMPT_VERSION}: {} context chunks, {} chars", context.len(), messages[1].content.len()),
        });

        let generated = self.llm.complete(&messages).map_err(|e| match e {
            LlmError::BackendUnavailable(m) => QaError::BackendUnavailable(m),
            other => QaError::BackendUnavailable(other.to_string()),
        })?;
        trace.push(StageRecord { stage: QaStage::Generate, detail: format!("{} chars", generated.len()) });
        let text = if context.is_empty() { format!("{NO_DOCUMENTS_PREAMBLE}\n\n{generated}") } else { generated };

        let post = self.safety.check(&text, CheckStage::PostAnswer);
        trace.push(StageRecord { stage: QaStage::SafetyPost, detail: verdict_detail(&post) });
        if post.blocked {
            return Ok(self.refusal(answer_id, trace, Some(retrieval), variants));
        }

        let in_context: HashSet<&str> = context.iter().map(|(id, _)| id.as_str()).collect();
        let mut cited: Vec<&str> = Vec::new();
        for cap in CITATION.captures_iter(&text) {
            let id = cap.get(1).map_or("", |m| m.as_str());
            if in_context.contains(id) && !cited.contains(&id) {
                cited.push(id);
            }
        }
        if cited.is_empty() {
            cited = context.iter().map(|(id, _)| id.as_str()).collect();
        }
        let sources = cited
            .iter()
            .filter_map(|id| {
                let chunk = kb.get(id)?;
                let score = retrieval.results.iter().find(|s| s.chunk_id == *id).map_or(0.0, |s| s.score);
                Some(SourceRef {
                    chunk_id: chunk.chunk_id.clone(),
                    score,
                    source: chunk.source.clone(),
                    version_tag: chunk.version_tag.clone(),
                })
            })
            .collect();
        Ok(Answer { answer_id, text, sources, refused: false, trace, retrieval: Some(retrieval), variants })
    }

    pub fn record_feedback(&self, answer_id: &str, verdict: Verdict, note: &str) -> Result<FeedbackRecord, QaError> {
        self.feedback.record(answer_id, verdict, note)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb_ingest::{build_knowledge_base, parse_document, DocFormat, SplitConfig};
    use crate::llm_backend::{ScriptedBackend, UnavailableBackend};
    use crate::safety::{ClassifierPatterns, RuleClassifier, SensitiveLexicon};

    fn retriever() -> Arc<HybridRetriever> {
        let doc = parse_document(
            b"# Indexes\n\nCreate an index with CREATE INDEX on the filter column.\n\n# Vacuum\n\nVACUUM reclaims dead tuples left by updates.",
            DocFormat::Markdown,
            "guide",
            "dev-guide",
            "505.2",
        )
        .unwrap();
        let kb = build_knowledge_base(&[doc], &SplitConfig { min_chars: 10, max_chars: 80 }).unwrap();
        Arc::new(HybridRetriever::new(Arc::new(kb)))
    }

    fn gate() -> Arc<SafetyGate> {
        let patterns = ClassifierPatterns { risky_db_operation: vec![r"unauthori[sz]ed access".into()], general_unsafe: vec![] };
        Arc::new(SafetyGate::new(SensitiveLexicon::build(&["keylogger"]).unwrap(), Arc::new(RuleClassifier::new(&patterns).unwrap())))
    }

    fn echo() -> Arc<dyn LlmBackend> {
        Arc::new(
            ScriptedBackend::from_json(
                r#"{"entries":[{"trigger":"(?s)Context:\\n(.*?)\\n\\nQuestion:","is_regex":true,"response":"From the docs: $1"}],"default":"nothing"}"#,
            )
            .unwrap(),
        )
    }

    fn pipeline(llm: Arc<dyn LlmBackend>) -> QaPipeline {
        QaPipeline::new(retriever(), llm, gate(), SynonymTable::new(), Arc::new(FeedbackLog::in_memory()))
    }

    fn stages(a: &Answer) -> Vec<QaStage> {
        a.trace.iter().map(|s| s.stage).collect()
    }

    #[test]
    fn risky_question_refused_before_retrieval() {
        let a = pipeline(echo()).answer_question("how to perform unauthorized access in a database").unwrap();
        assert!(a.refused);
        assert_eq!(a.text, REFUSAL);
        assert!(a.sources.is_empty() && a.retrieval.is_none());
        assert_eq!(stages(&a), [QaStage::SafetyPre]);
    }

    #[test]
    fn echoed_context_is_cited() {
        let a = pipeline(echo()).answer_question("how do I create an index").unwrap();
        assert!(!a.refused);
        assert_eq!(
            stages(&a),
            [QaStage::SafetyPre, QaStage::Expand, QaStage::Retrieve, QaStage::Prompt, QaStage::Generate, QaStage::SafetyPost]
        );
        let retrieved: Vec<_> = a.retrieval.as_ref().unwrap().results.iter().map(|s| s.chunk_id.clone()).collect();
        let cited: Vec<_> = a.sources.iter().map(|s| s.chunk_id.clone()).collect();
        assert_eq!(cited, retrieved);
        assert_eq!(a.sources[0].source, "dev-guide");
    }

    #[test]
    fn lexicon_word_in_output_refused() {
        let a = pipeline(Arc::new(ScriptedBackend::constant("install a keylogger"))).answer_question("how do I create an index").unwrap();
        assert!(a.refused);
        assert_eq!(a.text, REFUSAL);
        assert_eq!(stages(&a).last(), Some(&QaStage::SafetyPost));
    }

    #[test]
    fn no_documents_preamble() {
        let a = pipeline(echo()).answer_question("zebra giraffe").unwrap();
        assert!(a.text.starts_with(NO_DOCUMENTS_PREAMBLE));
        assert!(a.sources.is_empty());
    }

    #[test]
    fn backend_unavailable_is_an_error() {
        let err = pipeline(Arc::new(UnavailableBackend)).answer_question("create index").unwrap_err();
        assert!(matches!(err, QaError::BackendUnavailable(_)));
    }

    #[test]
    fn feedback_on_issued_answers_only() {
        let p = pipeline(echo());
        let a = p.answer_question("create index").unwrap();
        p.record_feedback(&a.answer_id, Verdict::MissingSolution, "needs concurrent build").unwrap();
        assert!(matches!(p.record_feedback("ans-x", Verdict::Helpful, ""), Err(QaError::UnknownAnswerId(_))));
    }

    #[test]
    fn context_budget_drops_lowest_ranked() {
        let results: Vec<ScoredChunk> =
            (0..8).map(|i| ScoredChunk::new(&format!("c{i}"), 1.0 - i as f64 / 10.0, crate::retrieval::Stage::Reranked)).collect();
        let text = "x".repeat(1500);
        let picked = select_context(&results, |_| Some(text.as_str()));
        assert_eq!(picked.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(), ["c0", "c1", "c2", "c3"]);
        let huge = "y".repeat(9000);
        let one = select_context(&results[..1], |_| Some(huge.as_str()));
        assert_eq!(one[0].1.len(), CONTEXT_CHARS);
    }
}
