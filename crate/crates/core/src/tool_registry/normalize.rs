//! Render raw tool payloads into short readable sentences.

use serde_json::Value;

use super::{MetricSeries, ToolResult, ToolStatus};

fn s<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or("?")
}

fn num(v: &Value, key: &str) -> Option<f64> {
    v.get(key).and_then(Value::as_f64)
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{x:.0}")
    } else {
        format!("{x:.2}")
    }
}

fn list<'a>(v: &'a Value, key: &str) -> &'a [Value] {
    v.get(key).and_then(Value::as_array).map_or(&[], Vec::as_slice)
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.as_f64().map_or_else(|| n.to_string(), fmt_num),
        other => other.to_string(),
    }
}

/// `[[ts, value], ...]` or `[{ts, value}, ...]`.
pub fn parse_series(v: &Value) -> Vec<(i64, f64)> {
    v.as_array()
        .into_iter()
        .flatten()
        .filter_map(|p| match p {
            Value::Array(pair) if pair.len() == 2 => Some((pair[0].as_i64()?, pair[1].as_f64()?)),
            Value::Object(_) => Some((p.get("ts")?.as_i64()?, p.get("value")?.as_f64()?)),
            _ => None,
        })
        .collect()
}

fn metric_text(d: &Value, series: &[(i64, f64)]) -> String {
    let metric = s(d, "metric");
    let unit = d.get("unit").and_then(Value::as_str).unwrap_or("");
    let peak = series.iter().map(|p| p.1).fold(f64::NAN, f64::max);
    let peak = if peak.is_nan() { String::from("n/a") } else { format!("{}{unit}", fmt_num(peak)) };
    let threshold = num(d, "threshold").map(|t| format!("{}{unit}", fmt_num(t)));
    let abnormal = d.get("abnormal").and_then(Value::as_bool).unwrap_or(false);
    match (abnormal, threshold) {
        (true, Some(t)) => format!("Metric {metric} is abnormal: peak {peak} exceeds threshold {t} over {} samples.", series.len()),
        (true, None) => format!("Metric {metric} is abnormal: peak {peak} over {} samples.", series.len()),
        (false, Some(t)) => format!("Metric {metric} is normal: peak {peak} stays below threshold {t}."),
        (false, None) => format!("Metric {metric} is normal: peak {peak}."),
    }
}

fn joined(items: &[Value], f: impl Fn(&Value) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join("; ")
}

fn render(tool: &str, d: &Value, series: &[(i64, f64)]) -> Option<String> {
    let text = match tool {
        "metric_inspect" => metric_text(d, series),
        "io_topk_process" => {
            let ps = list(d, "processes");
            if ps.is_empty() {
                return None;
            }
            let body = joined(ps, |p| {
                let mut line = format!(
                    "{} (pid {}, io {}%",
                    s(p, "name"),
                    scalar(p.get("pid").unwrap_or(&Value::Null)),
                    num(p, "io_util").map_or("?".into(), fmt_num)
                );
                if let Some(db) = p.get("db_name").and_then(Value::as_str) {
                    line.push_str(&format!(", db_name {db}"));
                }
                if let Some(q) = p.get("query").and_then(Value::as_str) {
                    line.push_str(&format!(", query \"{q}\""));
                }
                line.push(')');
                line
            });
            format!("Top I/O processes: {body}.")
        }
        "slow_sql_rca" => {
            let causes = list(d, "root_causes");
            if causes.is_empty() {
                return None;
            }
            let mut t = format!(
                "Slow SQL analysis on database {}: {}.",
                s(d, "db_name"),
                joined(causes, |c| format!("root cause {} ({})", s(c, "cause"), s(c, "detail")))
            );
            let sugg = list(d, "suggestions");
            if !sugg.is_empty() {
                t.push_str(&format!(" Suggestions: {}.", joined(sugg, scalar)));
            }
            t
        }
        "lock_wait_check" => {
            let waits = list(d, "waits");
            if waits.is_empty() {
                return None;
            }
            format!(
                "Lock waits: {}.",
                joined(waits, |w| format!(
                    "pid {} blocks pid {} on {} for {}s",
                    scalar(w.get("blocker_pid").unwrap_or(&Value::Null)),
                    scalar(w.get("waiter_pid").unwrap_or(&Value::Null)),
                    s(w, "relation"),
                    num(w, "wait_seconds").map_or("?".into(), fmt_num)
                ))
            )
        }
        "index_recommend" => {
            let recs = list(d, "recommendations");
            if recs.is_empty() {
                return None;
            }
            format!("Index recommendations: {}.", joined(recs, |r| s(r, "statement").to_string()))
        }
        "mem_analysis" => {
            let used = num(d, "used_pct")?;
            let ctx = list(d, "top_contexts");
            let mut t = format!("Memory usage at {}%.", fmt_num(used));
            if !ctx.is_empty() {
                t.push_str(&format!(
                    " Largest memory contexts: {}.",
                    joined(ctx, |c| format!("{} {} MB", s(c, "name"), num(c, "size_mb").map_or("?".into(), fmt_num)))
                ));
            }
            t
        }
        "wdr_report" => {
            let events = list(d, "top_events");
            let mut t = d.get("summary").and_then(Value::as_str).map(str::to_string).unwrap_or_default();
            if !events.is_empty() {
                if !t.is_empty() {
                    t.push(' ');
                }
                t.push_str(&format!(
                    "Top wait events: {}.",
                    joined(events, |e| format!("{} {}%", s(e, "event"), num(e, "wait_pct").map_or("?".into(), fmt_num)))
                ));
            }
            if t.is_empty() {
                return None;
            }
            t
        }
        "knob_recommend" => {
            let knobs = list(d, "knobs");
            if knobs.is_empty() {
                return None;
            }
            format!(
                "Knob recommendations: {}.",
                joined(knobs, |k| format!(
                    "set {} from {} to {}",
                    s(k, "name"),
                    scalar(k.get("current").unwrap_or(&Value::Null)),
                    scalar(k.get("recommended").unwrap_or(&Value::Null))
                ))
            )
        }
        _ => return generic(d),
    };
    Some(text)
}

fn generic(d: &Value) -> Option<String> {
    let obj = d.as_object()?;
    let parts: Vec<String> =
        obj.iter().filter(|(k, _)| k.as_str() != "received_arguments").map(|(k, v)| format!("{k}: {}", scalar(v))).collect();
    (!parts.is_empty()).then(|| parts.join("; "))
}

pub fn normalize_result(tool_name: &str, status: ToolStatus, raw: Value, message: String) -> ToolResult {
    let series = raw.get("series").map(parse_series).unwrap_or_default();
    let metrics = (!series.is_empty()).then(|| {
        vec![MetricSeries { metric: raw.get("metric").and_then(Value::as_str).unwrap_or(tool_name).to_string(), points: series.clone() }]
    });
    let normalized_text = match status {
        ToolStatus::Error => {
            let reason = if message.is_empty() { "no reason given" } else { message.as_str() };
            format!("Tool {tool_name} failed: {reason}")
        }
        ToolStatus::Ok => render(tool_name, &raw, &series).unwrap_or_else(|| format!("{tool_name}: no findings.")),
    };
    ToolResult { tool_name: tool_name.to_string(), status, raw, message, normalized_text, metrics }
}
