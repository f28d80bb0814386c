use serde::Serialize;

use super::run::{DiagnosisRun, ToolCallRecord, TraceEvent};
use crate::diagtree::RootCauseFamily;
use crate::llm_backend::{ask, LlmBackend};
use crate::tool_registry::MetricSeries;

pub const NO_ROOT_CAUSE: &str = "No root cause identified";

pub const SUMMARY_PROMPT: &str = "SUMMARIZE\nExpert: {expert}\nGuideline: {guideline}\nFindings:\n{findings}\n\
Rewrite the findings as a short summary for a DBA, following the guideline.";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evidence {
    pub evidence_id: String,
    pub task_id: String,
    pub agent_id: String,
    pub tool_name: String,
    pub normalized_text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<MetricSeries>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootCause {
    pub cause: String,
    pub confidence_note: String,
    pub recommendation: String,
    pub family: RootCauseFamily,
    pub evidence_task_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertSummary {
    pub agent_id: String,
    pub name: String,
    pub family: RootCauseFamily,
    pub prompt: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecruitedExpert {
    pub agent_id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisReport {
    pub report_id: String,
    pub alert: String,
    pub tree_id: Option<String>,
    pub inconclusive: bool,
    pub recruited_experts: Vec<RecruitedExpert>,
    pub summaries: Vec<ExpertSummary>,
    pub evidence: Vec<Evidence>,
    pub root_causes: Vec<RootCause>,
    pub tool_calls: Vec<ToolCallRecord>,
    pub trace: Vec<TraceEvent>,
    pub markdown: String,
}

impl DiagnosisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn guideline(family: RootCauseFamily) -> &'static str {
    match family {
        RootCauseFamily::Cpu => "Emphasize CPU usage: name the busiest statements or processes and whether CPU saturation is sustained.",
        RootCauseFamily::Io => "Emphasize disk I/O usage: report utilization against its threshold and which processes or statements drive the reads and writes.",
        RootCauseFamily::Lock => "Emphasize lock contention: name the blocking session, the contended object and how long waiters have been blocked.",
        RootCauseFamily::SlowSql => "Emphasize the slow statement: give its database, the plan problem behind it and the concrete tuning step.",
        RootCauseFamily::Other => "Summarize the abnormal observations and the next checks a DBA should run.",
    }
}

/// Keyword fallback when no root cause names a family.
pub fn family_for_text(text: &str) -> RootCauseFamily {
    let t = text.to_lowercase();
    let has = |words: &[&str]| words.iter().any(|w| t.contains(w));
    if has(&["slow sql", "slow query", "full table scan", "execution plan"]) {
        RootCauseFamily::SlowSql
    } else if has(&["lock", "deadlock", "blocked"]) {
        RootCauseFamily::Lock
    } else if has(&["i/o", "disk", "ioutil", "iops"]) {
        RootCauseFamily::Io
    } else if has(&["cpu"]) {
        RootCauseFamily::Cpu
    } else {
        RootCauseFamily::Other
    }
}

/// Markdown table cell: no pipes or line breaks.
fn cell(text: &str) -> String {
    text.replace('\\', "\\\\").replace('|', "\\|").replace(['\n', '\r'], " ")
}

/// One-line inline text outside tables.
fn inline(text: &str) -> String {
    text.replace(['\n', '\r'], " ")
}

pub fn summary_prompt(expert: &str, family: RootCauseFamily, findings: &[String]) -> String {
    let list = if findings.is_empty() {
        "- (none)".to_string()
    } else {
        findings.iter().map(|f| format!("- {}", inline(f))).collect::<Vec<_>>().join("\n")
    };
    SUMMARY_PROMPT.replace("{expert}", expert).replace("{guideline}", guideline(family)).replace("{findings}", &list)
}

pub(super) fn aggregate(run: &DiagnosisRun, llm: &dyn LlmBackend) -> DiagnosisReport {
    let mut summaries = Vec::new();
    for e in &run.experts {
        let own_tasks: Vec<&str> = run.evidence.iter().filter(|x| x.agent_id == e.profile.agent_id).map(|x| x.task_id.as_str()).collect();
        let family = run
            .root_causes
            .iter()
            .find(|rc| rc.evidence_task_ids.iter().any(|t| own_tasks.contains(&t.as_str())))
            .map(|rc| rc.family)
            .unwrap_or_else(|| family_for_text(&format!("{} {}", run.alert, e.findings.join(" "))));
        let prompt = summary_prompt(&e.profile.name, family, &e.findings);
        let summary = match ask(llm, &prompt) {
            Ok(s) if !s.trim().is_empty() => s.trim().to_string(),
            _ if e.findings.is_empty() => "No findings.".to_string(),
            _ => e.findings.join(" "),
        };
        summaries.push(ExpertSummary { agent_id: e.profile.agent_id.clone(), name: e.profile.name.clone(), family, prompt, summary });
    }
    let mut report = DiagnosisReport {
        report_id: format!("report-{}", run.run_id.trim_start_matches("diag-")),
        alert: run.alert.clone(),
        tree_id: run.tree_id().map(str::to_string),
        inconclusive: run.round_limit_hit || run.root_causes.is_empty(),
        recruited_experts: run
            .experts
            .iter()
            .map(|e| RecruitedExpert { agent_id: e.profile.agent_id.clone(), name: e.profile.name.clone() })
            .collect(),
        summaries,
        evidence: run.evidence.clone(),
        root_causes: run.root_causes.clone(),
        tool_calls: run.tool_calls.clone(),
        trace: run.events.clone(),
        markdown: String::new(),
    };
    report.markdown = render_markdown(&report);
    report
}

pub fn render_markdown(r: &DiagnosisReport) -> String {
    let mut md = format!("# Diagnosis report: {}\n\n", inline(&r.alert));
    md.push_str(&format!("- Report: `{}`\n", r.report_id));
    md.push_str(&format!("- Diagnosis tree: {}\n", r.tree_id.as_deref().unwrap_or("none (free exploration)")));
    md.push_str(&format!("- Status: {}\n", if r.inconclusive { "inconclusive" } else { "concluded" }));
    let names: Vec<&str> = r.recruited_experts.iter().map(|e| e.name.as_str()).collect();
    md.push_str(&format!("- Experts: {}\n\n", names.join(", ")));

    md.push_str("## Root causes\n\n");
    if r.root_causes.is_empty() {
        md.push_str(&format!("{NO_ROOT_CAUSE}.\n\n"));
    }
    for (n, rc) in r.root_causes.iter().enumerate() {
        md.push_str(&format!("{}. **{}**\n", n + 1, inline(&rc.cause)));
        md.push_str(&format!("   - Recommendation: {}\n", inline(&rc.recommendation)));
        md.push_str(&format!("   - Confidence: {}\n", inline(&rc.confidence_note)));
        md.push_str(&format!("   - Evidence: {}\n", rc.evidence_task_ids.join(", ")));
    }
    if !r.root_causes.is_empty() {
        md.push('\n');
    }

    md.push_str("## Expert summaries\n\n");
    for s in &r.summaries {
        md.push_str(&format!("### {}\n\n{}\n\n", s.name, inline(&s.summary)));
    }

    md.push_str("## Evidence\n\n");
    if r.evidence.is_empty() {
        md.push_str("No tools were invoked.\n\n");
    } else {
        md.push_str("| Task | Expert | Tool | Result |\n| --- | --- | --- | --- |\n");
        for e in &r.evidence {
            md.push_str(&format!("| {} | {} | {} | {} |\n", e.task_id, cell(&e.agent_id), cell(&e.tool_name), cell(&e.normalized_text)));
        }
        md.push('\n');
    }
    for e in &r.evidence {
        for series in e.metrics.iter().flatten() {
            md.push_str(&format!("### Metric {} ({})\n\n| Timestamp | Value |\n| --- | --- |\n", cell(&series.metric), e.task_id));
            for (ts, v) in &series.points {
                md.push_str(&format!("| {ts} | {v} |\n"));
            }
            md.push('\n');
        }
    }

    md.push_str("## Trace\n\n");
    for ev in &r.trace {
        let task = ev.task_id.as_deref().map(|t| format!(" [{t}]")).unwrap_or_default();
        md.push_str(&format!("{}. round {} `{}` {}{}: {}\n", ev.seq, ev.round, ev.agent, ev.kind, task, inline(&ev.detail)));
    }
    md
}
