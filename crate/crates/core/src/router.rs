//! Question pre-processing: expansion, decomposition and intent routing.

use std::collections::{BTreeMap, HashSet};
use std::sync::LazyLock;

use regex::{Regex, RegexSet};
use serde::{Deserialize, Serialize};

use crate::llm_backend::{ask, LlmBackend};

pub const MAX_VARIANTS: usize = 8;
pub const MAX_REPHRASINGS: usize = 2;

/// term → synonyms; sorted so expansion order is stable.
pub type SynonymTable = BTreeMap<String, Vec<String>>;

pub fn parse_synonyms(json: &str) -> Result<SynonymTable, serde_json::Error> {
    serde_json::from_str(json)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Qa,
    Diagnosis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntentSource {
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessedQuestion {
    pub original: String,
    pub variants: Vec<String>,
    pub sub_queries: Vec<String>,
    pub intent: Intent,
    pub intent_source: IntentSource,
}

fn term_regex(term: &str) -> Regex {
    Regex::new(&format!(r"(?i)\b{}\b", regex::escape(term))).expect("escaped term is a valid regex")
}

/// Original first, then one variant per applicable (term, synonym) pair,
/// then up to two LLM rephrasings; de-duplicated and capped.
pub fn expand_question(q: &str, synonyms: &SynonymTable, llm: Option<&dyn LlmBackend>) -> Vec<String> {
    let mut variants = vec![q.to_string()];
    for (term, alts) in synonyms {
        let re = term_regex(term);
        if !re.is_match(q) {
            continue;
        }
        for alt in alts {
            variants.push(re.replace_all(q, regex::NoExpand(alt)).into_owned());
        }
    }
    if let Some(llm) = llm {
        variants.extend(rephrase(q, llm));
    }
    let mut seen = HashSet::new();
    variants.retain(|v| seen.insert(v.to_lowercase()));
    variants.truncate(MAX_VARIANTS);
    variants
}

const REPHRASE_PROMPT: &str = "Rephrase the database question below in up to two different ways that keep its meaning.\n\
Reply with the header REPHRASINGS: followed by one rephrasing per line.\nQuestion: ";

fn rephrase(q: &str, llm: &dyn LlmBackend) -> Vec<String> {
    let Ok(reply) = ask(llm, &format!("{REPHRASE_PROMPT}{q}")) else {
        return Vec::new();
    };
    headed_lines(&reply, "REPHRASINGS:").into_iter().take(MAX_REPHRASINGS).collect()
}

/// Lines following `header`, with list markers stripped; empty if the header is absent.
fn headed_lines(reply: &str, header: &str) -> Vec<String> {
    let Some((_, body)) = reply.split_once(header) else {
        return Vec::new();
    };
    body.lines().map(|l| l.trim().trim_start_matches(['-', '*', ' ']).trim()).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

static CLAUSE_SPLIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\s*(?:;|,?\s+and\s+also\s+|,?\s+and\s+then\s+|,?\s+as\s+well\s+as\s+check\s+)\s*").expect("valid clause regex")
});

fn rule_decompose(q: &str) -> Vec<String> {
    let mut out = Vec::new();
    for sentence in q.split_inclusive('?') {
        for clause in CLAUSE_SPLIT.split(sentence) {
            let clause = clause.trim();
            if clause.chars().filter(|c| c.is_alphanumeric()).count() >= 2 {
                out.push(clause.to_string());
            }
        }
    }
    out
}

const DECOMPOSE_PROMPT: &str = "Split the request below into independent sub-queries if it asks several things.\n\
Reply with the header SUB-QUERIES: followed by one sub-query per line, or with SINGLE if it is one question.\nRequest: ";

/// Rule split on question marks and explicit conjunctions; the LLM is only
/// consulted when the rules find a single clause.
pub fn decompose(q: &str, llm: Option<&dyn LlmBackend>) -> Vec<String> {
    let rules = rule_decompose(q);
    if rules.len() > 1 {
        return rules;
    }
    if let Some(llm) = llm {
        if let Ok(reply) = ask(llm, &format!("{DECOMPOSE_PROMPT}{q}")) {
            let parts = headed_lines(&reply, "SUB-QUERIES:");
            if parts.len() > 1 {
                return parts;
            }
        }
    }
    vec![q.to_string()]
}

static DIAGNOSIS_TRIGGERS: LazyLock<RegexSet> = LazyLock::new(|| {
    RegexSet::new([
        r"(?i)\balert(s|ed|ing)?\b",
        r"(?i)\balarm(s|ed)?\b",
        r"(?i)\banomal(y|ies|ous)\b",
        r"(?i)\babnormal(ly)?\b",
        r"(?i)\bdiagnos(e|is|ing)\b",
        r"(?i)\broot[ -]cause\b",
        r"(?i)\b(high|spiking|spiked|soaring|saturated|excessive)\s+(cpu|memory|mem|i/o|io|disk|iops|load)\b",
        r"(?i)\b(cpu|memory|i/o|io|disk)\s+(usage|utilization|load)\s+(is\s+|has\s+)?(high|spik\w*|soar\w*|jump\w*|saturat\w*|at\s+\d+)",
    ])
    .expect("valid trigger regexes")
});

pub const INTENT_PROMPT: &str = "Classify the user's message for a database copilot.\n\
Reply with exactly QA if it asks for product knowledge, usage or code help, \
or exactly DIAGNOSIS if it reports an anomaly or asks to troubleshoot a running database.\nMessage: ";

pub fn rule_intent(q: &str) -> Option<Intent> {
    DIAGNOSIS_TRIGGERS.is_match(q).then_some(Intent::Diagnosis)
}

/// Rule pre-pass first; otherwise the LLM decides, and anything unparseable means QA.
pub fn route_intent(q: &str, llm: Option<&dyn LlmBackend>) -> (Intent, IntentSource) {
    if let Some(intent) = rule_intent(q) {
        return (intent, IntentSource::Rule);
    }
    let Some(llm) = llm else {
        return (Intent::Qa, IntentSource::Rule);
    };
    match ask(llm, &format!("{INTENT_PROMPT}{q}")) {
        Ok(reply) => {
            let word = reply.trim().trim_end_matches(['.', '!']).to_ascii_uppercase();
            match word.as_str() {
                "QA" => (Intent::Qa, IntentSource::Llm),
                "DIAGNOSIS" => (Intent::Diagnosis, IntentSource::Llm),
                _ => (Intent::Qa, IntentSource::Rule),
            }
        }
        Err(_) => (Intent::Qa, IntentSource::Rule),
    }
}

pub fn process_question(q: &str, synonyms: &SynonymTable, llm: Option<&dyn LlmBackend>) -> ProcessedQuestion {
    let (intent, intent_source) = route_intent(q, llm);
    ProcessedQuestion {
        original: q.to_string(),
        variants: expand_question(q, synonyms, llm),
        sub_queries: decompose(q, llm),
        intent,
        intent_source,
    }
}
