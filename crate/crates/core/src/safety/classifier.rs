//! Content classifiers for implicit risk.

use regex::RegexSet;
use serde::{Deserialize, Serialize};

use super::{ClassifierLabel, SafetyError};

pub trait ContentClassifier: Send + Sync {
    fn classify(&self, text: &str) -> Result<ClassifierLabel, SafetyError>;
}

/// Pattern config: `{"risky_db_operation": [regex...], "general_unsafe": [regex...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierPatterns {
    #[serde(default)]
    pub risky_db_operation: Vec<String>,
    #[serde(default)]
    pub general_unsafe: Vec<String>,
}

impl ClassifierPatterns {
    pub fn from_json(text: &str) -> Result<Self, SafetyError> {
        serde_json::from_str(text).map_err(|e| SafetyError::Config(e.to_string()))
    }
}

/// Case-insensitive regex rules; db-operation rules take precedence.
#[derive(Debug, Clone)]
pub struct RuleClassifier {
    risky: RegexSet,
    general: RegexSet,
}

impl RuleClassifier {
    pub fn new(patterns: &ClassifierPatterns) -> Result<Self, SafetyError> {
        let compile =
            |list: &[String]| RegexSet::new(list.iter().map(|p| format!("(?i){p}"))).map_err(|e| SafetyError::Config(e.to_string()));
        Ok(Self { risky: compile(&patterns.risky_db_operation)?, general: compile(&patterns.general_unsafe)? })
    }
}

impl ContentClassifier for RuleClassifier {
    fn classify(&self, text: &str) -> Result<ClassifierLabel, SafetyError> {
        if self.risky.is_match(text) {
            Ok(ClassifierLabel::RiskyDbOperation)
        } else if self.general.is_match(text) {
            Ok(ClassifierLabel::GeneralUnsafe)
        } else {
            Ok(ClassifierLabel::Safe)
        }
    }
}

/// Remote classifier: POST `{"text": ...}`, expects `{"label": "safe"|"risky_db_operation"|"general_unsafe"}`.
#[derive(Debug, Clone)]
pub struct HttpClassifier {
    url: String,
    agent: ureq::Agent,
}

impl HttpClassifier {
    pub fn new(url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(std::time::Duration::from_millis(500))).build().into();
        Self { url: url.into(), agent }
    }
}

#[derive(Deserialize)]
struct LabelResponse {
    label: ClassifierLabel,
}

impl ContentClassifier for HttpClassifier {
    fn classify(&self, text: &str) -> Result<ClassifierLabel, SafetyError> {
        let resp: LabelResponse = self
            .agent
            .post(&self.url)
            .send_json(serde_json::json!({ "text": text }))
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| SafetyError::Classifier(e.to_string()))?;
        Ok(resp.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_default() {
        let c = RuleClassifier::new(&ClassifierPatterns {
            risky_db_operation: vec!["unauthori[sz]ed".into()],
            general_unsafe: vec!["prejudice".into()],
        })
        .unwrap();
        assert_eq!(c.classify("Unauthorized prejudice").unwrap(), ClassifierLabel::RiskyDbOperation);
        assert_eq!(c.classify("ethnic prejudice").unwrap(), ClassifierLabel::GeneralUnsafe);
        assert_eq!(c.classify("how to create an index").unwrap(), ClassifierLabel::Safe);
    }

    #[test]
    fn bad_regex_is_config_error() {
        let err = RuleClassifier::new(&ClassifierPatterns { risky_db_operation: vec!["(".into()], general_unsafe: vec![] });
        assert!(matches!(err, Err(SafetyError::Config(_))));
    }

    #[test]
    fn unreachable_remote_classifier_errors() {
        let c = HttpClassifier::new("http://127.0.0.1:9/classify");
        assert!(matches!(c.classify("x"), Err(SafetyError::Classifier(_))));
    }
}
