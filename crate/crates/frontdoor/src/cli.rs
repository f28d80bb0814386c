//! Command-line interface. Exit codes: 0 success, 1 operational error, 2 usage error.

use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use dbcopilot::diag_agents::DiagError;
use dbcopilot::eval_harness::{
    eval_answers, eval_tool_invocation, parse_jsonl, AnswerJudge, ContainsJudge, EvalError, LlmJudge, ModeJudge,
};
use dbcopilot::kb_ingest::{build_from_raw, read_directory, IngestError, SplitConfig};
use dbcopilot::qa_pipeline::QaError;
use dbcopilot::safety::{check_lexicon_file, SafetyError};
use dbcopilot::tool_registry::mock_server::run_mock_server;
use dbcopilot::tool_registry::ArgMap;
use serde_json::Value;
use thiserror::Error;

use crate::api::{router, spawn_sweeper, AppState};
use crate::config::{ConfigError, CopilotConfig};
use crate::payload::AskResponse;
use crate::sessions::SessionStore;

#[derive(Debug, Parser)]
#[command(name = "dbcopilot", version, about = "Database maintenance copilot")]
pub struct Cli {
    /// Config file; `./copilot.toml` is used when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a KB manifest from a directory of .md/.txt files.
    Ingest {
        dir: PathBuf,
        #[arg(long, default_value = "kb.jsonl")]
        out: PathBuf,
        #[arg(long, default_value = "docs")]
        source: String,
        #[arg(long, default_value = "unversioned")]
        version_tag: String,
    },
    /// Answer a question from the knowledge base.
    Ask {
        question: String,
        #[arg(long)]
        json: bool,
    },
    /// Diagnose an alert against the tool server.
    Diagnose {
        alert: String,
        /// Parameter value for tools, `name=value`; repeatable.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, Value)>,
        /// Mock scenario to serve in-process (ignored when tools_url is set).
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<IpAddr>,
    },
    /// Score a fixture.
    Eval {
        kind: EvalKind,
        fixture: PathBuf,
        #[arg(long, value_enum, default_value = "contains")]
        judge: JudgeKind,
        #[arg(long)]
        json: bool,
    },
    /// Sensitive-word lexicon utilities.
    Lexicon {
        #[command(subcommand)]
        command: LexiconCommand,
    },
    /// Serve canned tool responses for one scenario.
    MockTools {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 9100)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
    },
}

#[derive(Debug, Subcommand)]
pub enum LexiconCommand {
    Check { file: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalKind {
    Tools,
    Answers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeKind {
    /// Key-phrase containment.
    Contains,
    /// Ask the configured LLM.
    Llm,
    /// Per-case judge_mode.
    Mode,
}

fn parse_param(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    if k.trim().is_empty() {
        return Err(format!("empty parameter name in `{s}`"));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid lexicon: {0}")]
    Lexicon(#[from] SafetyError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("diagnosis needs parameters: {} (pass --param name=value)", .0.join(", "))]
    NeedsParams(Vec<String>),
    #[error("server: {0}")]
    Server(String),
    #[error("output: {0}")]
    Output(#[from] std::io::Error),
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("payload serializes")
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = CopilotConfig::discover(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { dir, out: path, source, version_tag } => {
            let split = cfg.split_config()?;
            ingest(&dir, &path, &source, &version_tag, &split, out)
        }
        Command::Ask { question, json } => {
            let pipeline = cfg.pipeline(cfg.llm()?)?;
            let resp = AskResponse::from(pipeline.answer_question(&question)?);
            if json {
                writeln!(out, "{}", to_json(&resp))?;
            } else {
                write!(out, "{}", resp.to_markdown())?;
            }
            Ok(())
        }
        Command::Diagnose { alert, params, scenario, json } => {
            let engine = cfg.engine(scenario.as_deref(), cfg.llm()?)?;
            let mut run = engine.start(&alert)?;
            run.session_values.extend(params.into_iter().collect::<ArgMap>());
            run.advance(&engine)?;
            if let Some(pending) = run.pending_params() {
                return Err(CliError::NeedsParams(pending.iter().map(|p| p.name.clone()).collect()));
            }
            let report = run.report.as_ref().expect("finished run has a report");
            if json {
                writeln!(out, "{}", to_json(report))?;
            } else {
                write!(out, "{}", report.markdown)?;
            }
            Ok(())
        }
        Command::Serve { port, bind } => serve(&cfg, port, bind),
        Command::Eval { kind, fixture, judge, json } => eval(&cfg, kind, &fixture, judge, json, out),
        Command::Lexicon { command: LexiconCommand::Check { file } } => {
            let report = check_lexicon_file(&read(&file)?)?;
            writeln!(
                out,
                "ok: {} words, {} duplicates, {} comment/blank lines",
                report.words,
                report.duplicates.len(),
                report.comment_or_blank_lines
            )?;
            for d in &report.duplicates {
                writeln!(out, "duplicate: {d}")?;
            }
            Ok(())
        }
        Command::MockTools { scenario, port, bind } => {
            let scenarios = cfg.scenarios()?;
            if !scenarios.contains_key(&scenario) {
                return Err(CliError::Config(ConfigError::Invalid(format!("unknown mock scenario `{scenario}`"))));
            }
            let handle =
                run_mock_server(&scenarios, &scenario, SocketAddr::new(bind, port)).map_err(|e| CliError::Server(e.to_string()))?;
            writeln!(out, "mock tools for `{scenario}` on {}", handle.base_url())?;
            out.flush()?;
            handle.wait();
            Ok(())
        }
    }
}

pub fn ingest(dir: &Path, path: &Path, source: &str, version_tag: &str, split: &SplitConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let raw = read_directory(dir, source, version_tag)?;
    let kb = build_from_raw(&raw, split)?;
    kb.write_manifest(path)?;
    writeln!(out, "ingested {} documents into {} chunks: {}", raw.len(), kb.len(), path.display())?;
    Ok(())
}

fn eval(cfg: &CopilotConfig, kind: EvalKind, fixture: &Path, judge: JudgeKind, json: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let text = read(fixture)?;
    let llm = cfg.llm()?;
    match kind {
        EvalKind::Tools => {
            let registry = cfg.registry()?;
            let report = eval_tool_invocation(&parse_jsonl(&text)?, &registry, Some(llm.as_ref()))?;
            if json {
                writeln!(out, "{}", to_json(&report))?;
            } else {
                write!(out, "{}", report.render_table())?;
                writeln!(out, "selection_accuracy={:.4} param_fill_accuracy={:.4}", report.selection_accuracy, report.param_fill_accuracy)?;
            }
        }
        EvalKind::Answers => {
            let pipeline = cfg.pipeline(llm.clone())?;
            let judge: Box<dyn AnswerJudge + '_> = match judge {
                JudgeKind::Contains => Box::new(ContainsJudge),
                JudgeKind::Llm => Box::new(LlmJudge { llm: llm.as_ref() }),
                JudgeKind::Mode => Box::new(ModeJudge { llm: Some(llm.as_ref()) }),
            };
            let report = eval_answers(&parse_jsonl(&text)?, &pipeline, judge.as_ref())?;
            if json {
                writeln!(out, "{}", to_json(&report))?;
            } else {
                write!(out, "{}", report.render_table())?;
                writeln!(out, "high_quality_ratio={:.4}", report.high_quality_ratio)?;
            }
        }
    }
    Ok(())
}

fn serve(cfg: &CopilotConfig, port: Option<u16>, bind: Option<IpAddr>) -> Result<(), CliError> {
    let llm = cfg.llm()?;
    let state =
        AppState::new(cfg.pipeline(llm.clone())?, cfg.engine(None, llm)?, SessionStore::new(Duration::from_secs(cfg.session_ttl_s)))
            .with_kb_path(cfg.kb_path.clone())
            .with_split(cfg.split_config()?);
    let bind = match bind {
        Some(b) => b,
        None => cfg.bind.parse().map_err(|e| ConfigError::Invalid(format!("bind `{}`: {e}", cfg.bind)))?,
    };
    let addr = SocketAddr::new(bind, port.unwrap_or(cfg.port));
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let state = Arc::new(state);
        spawn_sweeper(state.sessions.clone());
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::Server(format!("{addr}: {e}")))?;
        tracing::info!(%addr, "serving");
        eprintln!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Server(e.to_string()))
    })
}
