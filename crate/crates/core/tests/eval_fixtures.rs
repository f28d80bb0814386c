use std::time::Instant;

use dbcopilot::bundled;
use std::sync::Arc;

use dbcopilot::eval_harness::{
    eval_answers, eval_intents, eval_tool_invocation, parse_jsonl, AnswerEvalCase, ContainsJudge, IntentEvalCase, QualityLabel,
    ToolEvalCase,
};
use dbcopilot::router::IntentSource;

#[test]
fn bundled_tool_fixture_meets_floors() {
    let cases: Vec<ToolEvalCase> = parse_jsonl(bundled::eval::TOOL_CASES).unwrap();
    assert_eq!(cases.len(), 120);
    let registry = bundled::tool_registry().unwrap();
    let llm = bundled::scripted_llm();
    let started = Instant::now();
    let report = eval_tool_invocation(&cases, &registry, Some(&llm)).unwrap();
    println!("{}", report.render_table());
    assert!(report.selection_accuracy >= 0.95, "{}", report.selection_accuracy);
    assert!(report.param_fill_accuracy >= 0.99, "{}", report.param_fill_accuracy);
    assert!(started.elapsed().as_secs() < 30);
}

#[test]
#[ignore]
fn dump_chunks() {
    for c in bundled::knowledge_base().unwrap().chunks() {
        println!("{} :: {}", c.chunk_id, c.text.chars().take(260).collect::<String>().replace('\n', "⏎"));
    }
}

#[test]
fn bundled_answer_fixture_meets_floor() {
    let cases: Vec<AnswerEvalCase> = parse_jsonl(bundled::eval::ANSWER_CASES).unwrap();
    let pipeline = bundled::qa_pipeline(Arc::new(bundled::scripted_llm())).unwrap();
    let started = Instant::now();
    let report = eval_answers(&cases, &pipeline, &ContainsJudge).unwrap();
    println!("{}", report.render_table());
    for v in report.per_case.iter().filter(|v| v.label != QualityLabel::High) {
        println!("{} {:?} {:?}", v.case_id, v.label, v.sources);
    }
    assert!(report.high_quality_ratio >= 0.85, "{}", report.high_quality_ratio);
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn bundled_intent_fixture_is_exact() {
    let cases: Vec<IntentEvalCase> = parse_jsonl(bundled::eval::INTENT_CASES).unwrap();
    assert_eq!(cases.len(), 40);
    let llm = bundled::scripted_llm();
    let report = eval_intents(&cases, Some(&llm)).unwrap();
    for v in report.per_case.iter().filter(|v| !v.correct) {
        println!("miss {} {:?}", v.case_id, v.predicted);
    }
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.rule_subset_llm_calls, 0);
    for (case, v) in cases.iter().zip(&report.per_case) {
        assert_eq!(case.case_id, v.case_id);
        assert_eq!(case.rule_resolvable, v.source == IntentSource::Rule && v.llm_calls == 0, "{}", case.case_id);
    }
}
