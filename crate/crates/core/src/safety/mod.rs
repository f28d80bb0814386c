//! Risky-question control.
//!
//! A question (and later the generated answer) is blocked when the
//! sensitive-word trie finds any word, or when the content classifier labels
//! it anything but safe. Classifier failures block as `general_unsafe`.

pub mod classifier;
pub mod lexicon;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classifier::{ClassifierPatterns, ContentClassifier, HttpClassifier, RuleClassifier};
pub use lexicon::{check_lexicon_file, LexiconReport, SensitiveLexicon, WordMatch};

pub const REFUSAL: &str = "GaussMaster cannot answer such a question.";

const GUIDELINE_MARKER: &str = "[safety-guidelines v1]";

const GUIDELINES: &str = "\
[safety-guidelines v1]
Before answering, make two supplementary judgments:
(a) Sensitive-topic classification: decide whether the question touches a sensitive topic \
such as data privacy, unauthorized access, privilege bypass, destructive bulk operations, \
or biased and unfair opinions. If it does, reply only with: GaussMaster cannot answer such a question.
(b) GaussDB relevance: judge whether the question is highly relevant to GaussDB. \
If it is not, say so briefly instead of borrowing behaviour from other database systems.";

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("lexicon word #{index} is empty")]
    EmptyWord { index: usize },
    #[error("classifier config: {0}")]
    Config(String),
    #[error("classifier unavailable: {0}")]
    Classifier(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierLabel {
    Safe,
    RiskyDbOperation,
    GeneralUnsafe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStage {
    PreQuestion,
    PostAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RiskVerdict {
    pub blocked: bool,
    pub matched_words: Vec<WordMatch>,
    pub classifier_label: ClassifierLabel,
    pub stage: CheckStage,
}

pub fn detect_words(text: &str, lexicon: &SensitiveLexicon) -> Vec<WordMatch> {
    lexicon.detect(text)
}

pub fn check(text: &str, lexicon: &SensitiveLexicon, classifier: &dyn ContentClassifier, stage: CheckStage) -> RiskVerdict {
    let matched_words = lexicon.detect(text);
    let classifier_label = match classifier.classify(text) {
        Ok(label) => label,
        Err(err) => {
            tracing::warn!(%err, "classifier failed; blocking");
            ClassifierLabel::GeneralUnsafe
        }
    };
    let blocked = !matched_words.is_empty() || classifier_label != ClassifierLabel::Safe;
    RiskVerdict { blocked, matched_words, classifier_label, stage }
}

pub fn refusal_response() -> &'static str {
    REFUSAL
}

/// Append the safety guideline block once.
pub fn safety_prompt(base_prompt: &str) -> String {
    if base_prompt.contains(GUIDELINE_MARKER) {
        return base_prompt.to_string();
    }
    if base_prompt.is_empty() {
        return GUIDELINES.to_string();
    }
    format!("{}\n\n{GUIDELINES}", base_prompt.trim_end())
}

/// Lexicon plus classifier, shared by both check stages.
#[derive(Clone)]
pub struct SafetyGate {
    pub lexicon: Arc<SensitiveLexicon>,
    pub classifier: Arc<dyn ContentClassifier>,
}

impl std::fmt::Debug for SafetyGate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SafetyGate").field("words", &self.lexicon.word_count()).finish()
    }
}

impl SafetyGate {
    pub fn new(lexicon: SensitiveLexicon, classifier: Arc<dyn ContentClassifier>) -> Self {
        Self { lexicon: Arc::new(lexicon), classifier }
    }

    pub fn check(&self, text: &str, stage: CheckStage) -> RiskVerdict {
        check(text, &self.lexicon, self.classifier.as_ref(), stage)
    }
}
