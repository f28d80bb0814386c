//! `copilot.toml` and the service graph built from it.
//!
//! Every path is optional; anything unset falls back to the bundled assets.
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dbcopilot::bundled;
use dbcopilot::diag_agents::{AgentRoster, DiagError, DiagnosisEngine};
use dbcopilot::diagtree::{load_tree_dir, parse_history, TreeError, TreeLibrary};
use dbcopilot::kb_ingest::{IngestError, KnowledgeBase, SplitConfig};
use dbcopilot::llm_backend::{BackendConfig, BackendKind, LlmBackend, LlmError};
use dbcopilot::qa_pipeline::{FeedbackLog, QaError, QaPipeline};
use dbcopilot::retrieval::HybridRetriever;
use dbcopilot::safety::{ClassifierPatterns, ContentClassifier, HttpClassifier, RuleClassifier, SafetyError, SafetyGate, SensitiveLexicon};
use dbcopilot::tool_registry::mock_server::{parse_scenarios, InProcessInvoker, MockToolset, ScenarioFile};
use dbcopilot::tool_registry::{HttpInvoker, ToolError, ToolInvoker, ToolRegistry};
use serde::Deserialize;
use thiserror::Error;

pub const DEFAULT_CONFIG_FILE: &str = "copilot.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Qa(#[from] QaError),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub kind: Option<BackendKind>,
    pub script_file: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model_name: Option<String>,
    pub timeout_s: Option<u64>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CopilotConfig {
    pub bind: String,
    pub port: u16,
    pub kb_path: Option<PathBuf>,
    pub feedback_path: Option<PathBuf>,
    pub tools_path: Option<PathBuf>,
    pub trees_dir: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    pub agents_path: Option<PathBuf>,
    pub lexicon_path: Option<PathBuf>,
    pub classifier_path: Option<PathBuf>,
    pub classifier_url: Option<String>,
    /// Tool server base URL; unset means the in-process mock.
    pub tools_url: Option<String>,
    pub scenarios_path: Option<PathBuf>,
    pub mock_scenario: String,
    pub min_chars: usize,
    pub max_chars: usize,
    pub session_ttl_s: u64,
    pub llm: LlmSection,
}

impl Default for CopilotConfig {
    fn default() -> Self {
        let split = SplitConfig::default();
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            kb_path: None,
            feedback_path: None,
            tools_path: None,
            trees_dir: None,
            history_path: None,
            agents_path: None,
            lexicon_path: None,
            classifier_path: None,
            classifier_url: None,
            tools_url: None,
            scenarios_path: None,
            mock_scenario: "high_io".into(),
            min_chars: split.min_chars,
            max_chars: split.max_chars,
            session_ttl_s: 3600,
            llm: LlmSection::default(),
        }
    }
}

impl CopilotConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?, path.parent().unwrap_or(Path::new(".")))
    }

    /// An explicit path must exist; otherwise `./copilot.toml` is used when present.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit {
            Some(p) => Self::load(p),
            None if Path::new(DEFAULT_CONFIG_FILE).is_file() => Self::load(Path::new(DEFAULT_CONFIG_FILE)),
            None => Ok(Self::default()),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        for p in [
            &mut self.kb_path,
            &mut self.feedback_path,
            &mut self.tools_path,
            &mut self.trees_dir,
            &mut self.history_path,
            &mut self.agents_path,
            &mut self.lexicon_path,
            &mut self.classifier_path,
            &mut self.scenarios_path,
            &mut self.llm.script_file,
        ] {
            fix(p);
        }
    }

    pub fn split_config(&self) -> Result<SplitConfig, ConfigError> {
        let cfg = SplitConfig { min_chars: self.min_chars, max_chars: self.max_chars };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Backend settings with the `COPILOT_LLM_*` environment applied on top.
    pub fn backend_config(&self) -> Result<BackendConfig, ConfigError> {
        let defaults = BackendConfig::default();
        let cfg = BackendConfig {
            kind: self.llm.kind.unwrap_or(defaults.kind),
            script_file: self.llm.script_file.as_ref().map(|p| p.display().to_string()),
            base_url: self.llm.base_url.clone(),
            model_name: self.llm.model_name.clone(),
            timeout_s: self.llm.timeout_s.unwrap_or(defaults.timeout_s),
            max_retries: self.llm.max_retries.unwrap_or(defaults.max_retries),
        };
        Ok(cfg.apply_env()?)
    }

    pub fn llm(&self) -> Result<Arc<dyn LlmBackend>, ConfigError> {
        let cfg = self.backend_config()?;
        if cfg.kind == BackendKind::Scripted && cfg.script_file.is_none() {
            return Ok(Arc::new(bundled::scripted_llm()));
        }
        Ok(cfg.build()?)
    }

    pub fn registry(&self) -> Result<ToolRegistry, ConfigError> {
        match &self.tools_path {
            Some(p) => Ok(ToolRegistry::from_json(&read(p)?)?),
            None => Ok(bundled::tool_registry()?),
        }
    }

    pub fn scenarios(&self) -> Result<ScenarioFile, ConfigError> {
        match &self.scenarios_path {
            Some(p) => Ok(parse_scenarios(&read(p)?)?),
            None => Ok(bundled::scenarios()?),
        }
    }

    pub fn invoker(&self, scenario: Option<&str>) -> Result<Arc<dyn ToolInvoker>, ConfigError> {
        if let Some(url) = &self.tools_url {
            return Ok(Arc::new(HttpInvoker::new(url)));
        }
        let scenarios = self.scenarios()?;
        let name = scenario.unwrap_or(&self.mock_scenario);
        if !scenarios.contains_key(name) {
            return Err(ConfigError::Invalid(format!("unknown mock scenario `{name}`")));
        }
        Ok(Arc::new(InProcessInvoker { toolset: MockToolset::new(&scenarios, name) }))
    }

    fn library(&self) -> Result<TreeLibrary, ConfigError> {
        let trees = match &self.trees_dir {
            Some(dir) => load_tree_dir(dir)?,
            None => bundled::trees()?,
        };
        let history = match &self.history_path {
            Some(p) => parse_history(&read(p)?)?,
            None => parse_history(bundled::HISTORY_JSONL)?,
        };
        Ok(TreeLibrary::new(trees, history))
    }

    pub fn engine(&self, scenario: Option<&str>, llm: Arc<dyn LlmBackend>) -> Result<DiagnosisEngine, ConfigError> {
        let registry = Arc::new(self.registry()?);
        let library = self.library()?;
        library.validate_against(&registry)?;
        let roster = match &self.agents_path {
            Some(p) => AgentRoster::from_json(&read(p)?, &registry)?,
            None => bundled::agent_roster(&registry)?,
        };
        Ok(DiagnosisEngine {
            registry,
            invoker: self.invoker(scenario)?,
            llm,
            library: Arc::new(library),
            roster: Arc::new(roster),
            config: Default::default(),
        })
    }

    pub fn safety(&self) -> Result<SafetyGate, ConfigError> {
        let lexicon = match &self.lexicon_path {
            Some(p) => SensitiveLexicon::parse_file(&read(p)?)?,
            None => bundled::lexicon()?,
        };
        let classifier: Arc<dyn ContentClassifier> = match (&self.classifier_url, &self.classifier_path) {
            (Some(url), _) => Arc::new(HttpClassifier::new(url.clone())),
            (None, Some(p)) => Arc::new(RuleClassifier::new(&ClassifierPatterns::from_json(&read(p)?)?)?),
            (None, None) => Arc::new(bundled::classifier()?),
        };
        Ok(SafetyGate::new(lexicon, classifier))
    }

    /// The configured manifest, or the bundled corpus when none is set.
    pub fn knowledge_base(&self) -> Result<KnowledgeBase, ConfigError> {
        match &self.kb_path {
            Some(p) => Ok(KnowledgeBase::read_manifest(p)?),
            None => Ok(bundled::knowledge_base()?),
        }
    }

    pub fn pipeline(&self, llm: Arc<dyn LlmBackend>) -> Result<QaPipeline, ConfigError> {
        let retriever = Arc::new(HybridRetriever::new(Arc::new(self.knowledge_base()?)));
        let feedback = match &self.feedback_path {
            Some(p) => FeedbackLog::open(p)?,
            None => FeedbackLog::in_memory(),
        };
        let synonyms = bundled::synonyms();
        Ok(QaPipeline::new(retriever, llm, Arc::new(self.safety()?), synonyms, Arc::new(feedback)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(CopilotConfig::parse("", Path::new("/x")).unwrap(), CopilotConfig::default());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg =
            CopilotConfig::parse("kb_path = \"data/kb.jsonl\"\n[llm]\nscript_file = \"/abs/s.json\"\n", Path::new("/etc/cp")).unwrap();
        assert_eq!(cfg.kb_path.unwrap(), PathBuf::from("/etc/cp/data/kb.jsonl"));
        assert_eq!(cfg.llm.script_file.unwrap(), PathBuf::from("/abs/s.json"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(CopilotConfig::parse("prot = 1", Path::new(".")), Err(ConfigError::Toml(_))));
    }

    #[test]
    fn bad_split_bounds() {
        let cfg = CopilotConfig { min_chars: 500, max_chars: 100, ..Default::default() };
        assert!(cfg.split_config().is_err());
    }

    #[test]
    fn unknown_scenario_is_invalid() {
        let cfg = CopilotConfig { mock_scenario: "nope".into(), ..Default::default() };
        assert!(matches!(cfg.invoker(None), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn bundled_services_build() {
        let cfg = CopilotConfig::default();
        let llm = cfg.llm().unwrap();
        assert!(cfg.engine(None, llm.clone()).is_ok());
        assert!(!cfg.pipeline(llm).unwrap().retriever().kb().is_empty());
    }
}
