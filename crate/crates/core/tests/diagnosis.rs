use std::sync::Arc;

use dbcopilot::bundled;
use dbcopilot::diag_agents::run::ToolCallRecord;
use dbcopilot::diag_agents::{CrossReviewMessage, DiagError, DiagnosisConfig, DiagnosisEngine, RunState};
use dbcopilot::diagtree::RootCauseFamily;
use dbcopilot::llm_backend::ScriptedBackend;
use dbcopilot::tool_registry::mock_server::{InProcessInvoker, MockToolset};
use dbcopilot::tool_registry::ArgMap;
use pulldown_cmark::{Event, Options, Parser, Tag, TagEnd};
use serde_json::json;

fn engine(scenario: &str) -> DiagnosisEngine {
    engine_with(scenario, bundled::scripted_llm())
}

fn engine_with(scenario: &str, llm: ScriptedBackend) -> DiagnosisEngine {
    let toolset = MockToolset::new(&bundled::scenarios().unwrap(), scenario);
    DiagnosisEngine::bundled(Arc::new(InProcessInvoker { toolset }), Arc::new(llm)).unwrap()
}

fn tools(calls: &[ToolCallRecord]) -> Vec<&str> {
    calls.iter().map(|c| c.call.tool_name.as_str()).collect()
}

fn assert_invariants(engine: &DiagnosisEngine, run: &dbcopilot::diag_agents::DiagnosisRun) {
    let report = run.report.as_ref().expect("finished run has a report");
    for c in &report.tool_calls {
        let profile = engine.roster.get(&c.agent_id).unwrap();
        assert!(profile.may_use(&c.call.tool_name), "{} ran {}", c.agent_id, c.call.tool_name);
    }
    for rc in &report.root_causes {
        assert!(!rc.evidence_task_ids.is_empty());
        for t in &rc.evidence_task_ids {
            assert!(report.evidence.iter().any(|e| &e.task_id == t), "missing evidence {t}");
            assert!(report.trace.iter().any(|e| e.kind == "tool_invoked" && e.task_id.as_deref() == Some(t)));
        }
    }
    let cap: usize = report.recruited_experts.len() * engine.config.task_cap;
    assert!(report.tool_calls.len() <= engine.config.round_limit * cap);
}

#[test]
fn high_io_end_to_end() {
    let engine = engine("high_io");
    let run = engine.run_diagnosis("Abnormal I/O Usage").unwrap();
    assert_eq!(run.state, RunState::Done);
    let report = run.report.as_ref().unwrap();
    assert_eq!(report.tree_id.as_deref(), Some("high_io"));
    assert!(!report.inconclusive);
    assert_eq!(report.recruited_experts[0].name, "Resource Expert");
    assert_eq!(&tools(&report.tool_calls)[..3], ["metric_inspect", "io_topk_process", "slow_sql_rca"]);
    assert_eq!(report.tool_calls[0].agent_id, "resource_expert");
    assert_eq!(report.tool_calls[2].agent_id, "component_expert");
    assert_eq!(report.tool_calls[2].call.arguments["db_name"], json!("bankdb"));

    assert_eq!(report.root_causes.len(), 1);
    let rc = &report.root_causes[0];
    assert!(rc.cause.contains("full table scan on orders"), "{}", rc.cause);
    assert!(rc.cause.contains("bankdb"));
    assert!(rc.recommendation.starts_with("Index optimization"));
    assert!(rc.recommendation.contains("CREATE INDEX idx_orders_customer_status ON orders (customer_id, status);"));
    assert_eq!(rc.family, RootCauseFamily::SlowSql);
    assert!(report.markdown.contains("full table scan on orders"));
    assert!(report.trace.iter().any(|e| e.kind == "cross_review"));
    assert!(run.events.iter().any(|e| e.detail.contains("the os_disk_ioutils metric is abnormal")));
    assert_invariants(&engine, &run);
}

#[test]
fn high_io_is_deterministic() {
    let first = engine("high_io").run_diagnosis("Abnormal I/O Usage").unwrap().report.unwrap();
    for _ in 0..9 {
        let again = engine("high_io").run_diagnosis("Abnormal I/O Usage").unwrap().report.unwrap();
        assert_eq!(again.trace, first.trace);
        assert_eq!(again.to_json(), first.to_json());
    }
}

#[test]
fn free_exploration_without_a_tree() {
    let script = r#"{"entries": [
        {"trigger": "^PROPOSE STEPS", "is_regex": true, "response": "STEPS:\n1. Check lock waits and blocking sessions in database bankdb"},
        {"trigger": "(?s)^REFLECT\n.*Tool: lock_wait_check", "is_regex": true,
         "response": "CONCLUDED: a blocker holds row locks | ROOT_CAUSE: idle transaction holding locks on accounts | RECOMMEND: terminate session 9921"},
        {"trigger": "^SUMMARIZE", "is_regex": true, "response": "summary"}
    ], "default": "OK"}"#;
    let engine = engine_with("lock_contention", ScriptedBackend::from_json(script).unwrap());
    let run = engine.run_diagnosis("zzqx frobnicate").unwrap();
    let report = run.report.as_ref().unwrap();
    assert!(report.tree_id.is_none());
    assert!(run.events.iter().any(|e| e.kind == "no_tree_matched"));
    assert_eq!(report.recruited_experts[0].agent_id, "generalist");
    assert_eq!(tools(&report.tool_calls)[0], "lock_wait_check");
    assert_eq!(report.root_causes.len(), 1);
    assert_eq!(report.root_causes[0].cause, "idle transaction holding locks on accounts");
    assert_eq!(report.root_causes[0].family, RootCauseFamily::Lock);
    assert!(!report.inconclusive);
    assert_invariants(&engine, &run);
}

#[test]
fn round_limit_zero_is_inconclusive() {
    let engine = engine("high_io").with_config(DiagnosisConfig { round_limit: 0, ..DiagnosisConfig::default() });
    let run = engine.run_diagnosis("Abnormal I/O Usage").unwrap();
    let report = run.report.as_ref().unwrap();
    assert!(report.inconclusive);
    assert!(report.root_causes.is_empty());
    assert!(report.tool_calls.is_empty());
    assert!(report.markdown.contains("No root cause identified"));
}

#[test]
fn empty_alert_rejected() {
    assert_eq!(engine("high_io").run_diagnosis(" \n").unwrap_err(), DiagError::EmptyAlert);
}

#[test]
fn missing_parameters_pause_and_resume() {
    let engine = engine("slow_query");
    let mut run = engine.start("Slow query alarm on the invoice search").unwrap();
    assert_eq!(run.tree_id(), Some("slow_query"));
    assert_eq!(run.resume(&engine, ArgMap::new()).unwrap_err(), DiagError::NotAwaitingParams);
    run.advance(&engine).unwrap();
    let pending: Vec<&str> = run.pending_params().unwrap().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(pending, ["sql", "db_name"]);
    assert!(run.report.is_none());

    let mut values = ArgMap::new();
    values.insert("sql".into(), json!("SELECT * FROM invoices WHERE issued_at > now() - interval '1 day'"));
    values.insert("db_name".into(), json!("salesdb"));
    run.resume(&engine, values).unwrap();
    assert!(run.is_done());
    let report = run.report.as_ref().unwrap();
    assert_eq!(&tools(&report.tool_calls)[..2], ["slow_sql_rca", "index_recommend"]);
    assert_eq!(report.tool_calls[1].agent_id, "optimization_expert");
    assert_eq!(report.tool_calls[1].call.arguments["db_name"], json!("salesdb"));
    let rc = &report.root_causes[0];
    assert!(rc.cause.contains("stale statistics"));
    assert!(rc.recommendation.contains("CREATE INDEX idx_invoices_issued_at"));
    assert_invariants(&engine, &run);
}

#[test]
fn cross_review_rules() {
    let engine = engine("high_io");
    let mut run = engine.start("Abnormal I/O Usage").unwrap();
    let msg = |to: &str| CrossReviewMessage {
        from_agent: "resource_expert".into(),
        to_agent: to.into(),
        payload: "look".into(),
        suggested_tasks: vec![],
    };
    assert_eq!(run.cross_review(&engine.roster, msg("resource_expert")).unwrap_err(), DiagError::SelfReview("resource_expert".into()));
    assert!(matches!(run.cross_review(&engine.roster, msg("nobody")).unwrap_err(), DiagError::UnknownAgent(_)));
    let before = run.recruited().len();
    run.cross_review(&engine.roster, msg("optimization_expert")).unwrap();
    assert_eq!(run.recruited().len(), before + 1);
    run.cross_review(&engine.roster, msg("optimization_expert")).unwrap();
    assert_eq!(run.recruited().len(), before + 1);
    assert_eq!(run.messages.len(), 2);
}

/// Every table row has as many cells as its header and no fence is left open.
fn check_markdown(md: &str) {
    let mut cells = 0usize;
    let mut header_cells = None;
    let mut tables = 0;
    for ev in Parser::new_ext(md, Options::ENABLE_TABLES) {
        match ev {
            Event::Start(Tag::Table(_)) => tables += 1,
            Event::Start(Tag::TableHead) => cells = 0,
            Event::End(TagEnd::TableHead) => header_cells = Some(cells),
            Event::Start(Tag::TableRow) => cells = 0,
            Event::End(TagEnd::TableRow) => assert_eq!(Some(cells), header_cells, "ragged row"),
            Event::Start(Tag::TableCell) => cells += 1,
            Event::Start(Tag::CodeBlock(_)) => panic!("unexpected code block"),
            _ => {}
        }
    }
    assert!(tables >= 1);
}

#[test]
fn rendered_markdown_is_well_formed() {
    let report = engine("high_io").run_diagnosis("Abnormal I/O Usage").unwrap().report.unwrap();
    check_markdown(&report.markdown);
    // the evidence table plus one metric table
    assert_eq!(report.markdown.lines().filter(|l| l.starts_with("| --- |")).count(), 2);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["trace"].as_array().unwrap().len(), report.trace.len());
}

#[test]
fn io_summary_uses_io_guideline() {
    let report = engine("high_io").run_diagnosis("Abnormal I/O Usage").unwrap().report.unwrap();
    let resource = report.summaries.iter().find(|s| s.agent_id == "resource_expert").unwrap();
    assert_eq!(resource.family, RootCauseFamily::SlowSql);
    let component = report.summaries.iter().find(|s| s.agent_id == "component_expert").unwrap();
    assert!(component.prompt.contains("Emphasize the slow statement"));
}

#[test]
fn bundled_tree_matching() {
    let lib = bundled::tree_library().unwrap();
    for (alert, want) in [
        ("Abnormal I/O Usage", "high_io"),
        ("os_disk_ioutils above threshold on node 2", "high_io"),
        ("High CPU usage on node 1", "high_cpu"),
        ("Slow query alarm on salesdb", "slow_query"),
        ("Sessions blocked by lock waits on accounts", "lock_contention"),
    ] {
        assert_eq!(lib.match_tree(alert).unwrap().tree.tree_id, want, "{alert}");
    }
}

#[test]
fn unmatched_tools_need_more_then_stop() {
    let engine = engine_with("high_io", ScriptedBackend::constant("STEPS:\n1. qqq zzz"));
    let run = engine.run_diagnosis("zzqx frobnicate").unwrap();
    let report = run.report.as_ref().unwrap();
    assert!(report.tool_calls.is_empty());
    let needs_more = run.events.iter().filter(|e| e.kind == "needs_more").count();
    assert_eq!(needs_more, 1 + engine.config.max_retries as usize);
    assert!(report.inconclusive);
    assert!(!run.round_limit_hit);
}

fn dice_minus_offset(a: &str, b: &str) -> f64 {
    let set = |t: &str| -> std::collections::BTreeSet<String> {
        t.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| w.chars().count() >= 2).map(String::from).collect()
    };
    let (x, y) = (set(a), set(b));
    2.0 * x.intersection(&y).count() as f64 / (x.len() + y.len()) as f64 - 0.1
}

#[test]
fn expert_ranking_matches_hand_computed_overlap() {
    let registry = bundled::tool_registry().unwrap();
    let roster = bundled::agent_roster(&registry).unwrap();
    for alert in ["Abnormal I/O Usage", "slow SQL statements and lock waits", "index and knob tuning advice", "memory usage high"] {
        let mut expected: Vec<(f64, &str)> = roster
            .profiles()
            .iter()
            .filter(|p| !p.allowed_tools.is_empty())
            .map(|p| (dice_minus_offset(alert, &format!("{} {}", p.name, p.description)), p.agent_id.as_str()))
            .filter(|(s, _)| *s > 0.0)
            .collect();
        expected.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let got: Vec<&str> = roster.assign_experts(alert, 4).iter().map(|p| p.agent_id.as_str()).collect();
        let want: Vec<&str> = expected.iter().map(|e| e.1).collect();
        assert_eq!(got, want, "{alert}");
    }
}
