//! Database maintenance copilot engine.
//!
//! Product questions go through a safety-gated hybrid retrieval pipeline
//! ([`qa_pipeline`]); anomaly alerts go through diagnosis-tree guided,
//! multi-agent tool orchestration ([`diag_agents`]). Everything runs offline
//! against a scripted LLM ([`llm_backend`]) and a mock tool server
//! ([`tool_registry::mock_server`]).

pub mod bundled;
pub mod diag_agents;
pub mod diagtree;
pub mod eval_harness;
pub mod kb_ingest;
pub mod llm_backend;
pub mod qa_pipeline;
pub mod retrieval;
pub mod router;
pub mod safety;
pub mod text;
pub mod tool_registry;
