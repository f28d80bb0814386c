//! Parameter filling: known values, then typed pattern rules, then the LLM;
//! whatever required parameter is still unbound goes back to the user.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;

use super::{ArgMap, ParamSpec, ParamType, ToolDescriptor, ToolError};
use crate::llm_backend::{ask, LlmBackend};

#[derive(Debug, Clone, PartialEq)]
pub enum FillOutcome {
    Bound(ArgMap),
    Missing(Vec<ParamSpec>),
}

static KEY_VALUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)\b([a-z_][a-z0-9_]*)\s*(?:=|:)\s*(?:'([^']*)'|"([^"]*)"|`([^`]*)`|([^\s,;'"`]+))"#).expect("valid key-value regex")
});

static QUOTED_SQL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?is)(?:'((?:select|insert|update|delete|with|merge)\b[^']*)'|"((?:select|insert|update|delete|with|merge)\b[^"]*)"|`((?:select|insert|update|delete|with|merge)\b[^`]*)`)"#)
        .expect("valid sql regex")
});

static DATABASE_NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)\b(?:database|db)\s+(?:named\s+|called\s+)?['"]?([a-z_][a-z0-9_]*)"#).expect("valid db regex"));

const NOT_A_DB_NAME: &[&str] = &[
    "is",
    "was",
    "has",
    "are",
    "the",
    "a",
    "an",
    "server",
    "instance",
    "node",
    "cluster",
    "level",
    "side",
    "load",
    "usage",
    "and",
    "or",
    "with",
    "performance",
    "name",
    "it",
    "that",
    "this",
    "which",
    "to",
    "on",
    "in",
    "for",
];

fn key_alias(key: &str) -> String {
    match key.to_ascii_lowercase().as_str() {
        "db" | "database" | "dbname" => "db_name".into(),
        "query" | "statement" => "sql".into(),
        other => other.into(),
    }
}

/// Convert a supplied value to the parameter's type, or explain why not.
pub fn coerce_value(spec: &ParamSpec, value: &Value) -> Result<Value, ToolError> {
    let mismatch = || ToolError::TypeMismatch {
        param: spec.name.clone(),
        expected: format!("{:?}", spec.param_type).to_lowercase(),
        value: value.to_string(),
    };
    match spec.param_type {
        ParamType::String => match value {
            Value::String(s) if !s.trim().is_empty() => Ok(Value::String(s.trim().to_string())),
            Value::Number(n) => Ok(Value::String(n.to_string())),
            _ => Err(mismatch()),
        },
        ParamType::Int => match value {
            Value::Number(n) if n.is_i64() => Ok(value.clone()),
            Value::String(s) => s.trim().parse::<i64>().map(Value::from).map_err(|_| mismatch()),
            _ => Err(mismatch()),
        },
        ParamType::Float => match value {
            Value::Number(n) => n.as_f64().map(Value::from).ok_or_else(mismatch),
            Value::String(s) => s.trim().parse::<f64>().ok().filter(|f| f.is_finite()).map(Value::from).ok_or_else(mismatch),
            _ => Err(mismatch()),
        },
        ParamType::Enum => {
            let s = value.as_str().ok_or_else(mismatch)?.trim();
            let allowed = spec.enum_values.as_deref().unwrap_or_default();
            allowed.iter().find(|v| v.eq_ignore_ascii_case(s)).map(|v| Value::String(v.clone())).ok_or_else(mismatch)
        }
    }
}

fn rule_candidates(tool: &ToolDescriptor, context: &str) -> Vec<(String, Value)> {
    let mut found = Vec::new();
    for cap in KEY_VALUE.captures_iter(context) {
        let key = key_alias(&cap[1]);
        if tool.param(&key).is_none() {
            continue;
        }
        let raw = (2..=5).find_map(|i| cap.get(i)).map_or("", |m| m.as_str());
        found.push((key, Value::String(raw.to_string())));
    }
    if tool.param("sql").is_some() {
        if let Some(cap) = QUOTED_SQL.captures(context) {
            let sql = (1..=3).find_map(|i| cap.get(i)).map_or("", |m| m.as_str());
            found.push(("sql".into(), Value::String(sql.trim().to_string())));
        }
    }
    if tool.param("db_name").is_some() {
        let name = DATABASE_NAME
            .captures_iter(context)
            .map(|c| c[1].to_string())
            .find(|n| !NOT_A_DB_NAME.contains(&n.to_ascii_lowercase().as_str()));
        if let Some(name) = name {
            found.push(("db_name".into(), Value::String(name)));
        }
    }
    for p in &tool.params {
        if let Some(pat) = &p.pattern {
            let re = Regex::new(pat).expect("patterns are validated on registration");
            if let Some(m) = re.captures(context).and_then(|c| c.get(1)) {
                found.push((p.name.clone(), Value::String(m.as_str().to_string())));
            }
        }
        if p.param_type == ParamType::Enum {
            let lower = context.to_lowercase();
            let hits: Vec<&String> = p
                .enum_values
                .iter()
                .flatten()
                .filter(|v| Regex::new(&format!(r"\b{}\b", regex::escape(&v.to_lowercase()))).is_ok_and(|r| r.is_match(&lower)))
                .collect();
            if let [only] = hits.as_slice() {
                found.push((p.name.clone(), Value::String((*only).clone())));
            }
        }
    }
    found
}

const EXTRACT_PROMPT: &str = "Extract tool arguments from the diagnosis context.\n\
Reply with one JSON object mapping parameter name to value; omit parameters you cannot find.\n";

fn llm_candidates(tool: &ToolDescriptor, wanted: &[&ParamSpec], context: &str, llm: &dyn LlmBackend) -> Vec<(String, Value)> {
    let params: Vec<String> = wanted.iter().map(|p| format!("{} ({:?})", p.name, p.param_type).to_lowercase()).collect();
    let prompt = format!("{EXTRACT_PROMPT}Tool: {}\nParameters: {}\nContext: {context}", tool.name, params.join(", "));
    let Ok(reply) = ask(llm, &prompt) else {
        return Vec::new();
    };
    let (Some(start), Some(end)) = (reply.find('{'), reply.rfind('}')) else {
        return Vec::new();
    };
    let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&reply[start..=end.max(start)]) else {
        return Vec::new();
    };
    obj.into_iter().filter(|(k, _)| wanted.iter().any(|p| p.name == *k)).collect()
}

/// Bind the tool's parameters from `known` values (session answers and tree
/// hints, already merged by the caller), then rules over `context`, then the
/// LLM for required parameters still missing.
///
/// A malformed known or rule value is a `TypeMismatch`; malformed LLM output
/// is ignored so the parameter is asked for instead.
pub fn fill_parameters(
    tool: &ToolDescriptor,
    context: &str,
    known: &ArgMap,
    llm: Option<&dyn LlmBackend>,
) -> Result<FillOutcome, ToolError> {
    let mut bound = ArgMap::new();
    for p in &tool.params {
        if let Some(v) = known.get(&p.name) {
            bound.insert(p.name.clone(), coerce_value(p, v)?);
        }
    }
    for (name, value) in rule_candidates(tool, context) {
        if bound.contains_key(&name) {
            continue;
        }
        let spec = tool.param(&name).expect("rule candidates name real params");
        bound.insert(name, coerce_value(spec, &value)?);
    }
    let unbound: Vec<&ParamSpec> = tool.required_params().filter(|p| !bound.contains_key(&p.name)).collect();
    if let (Some(llm), false) = (llm, unbound.is_empty()) {
        for (name, value) in llm_candidates(tool, &unbound, context, llm) {
            let spec = tool.param(&name).expect("filtered to wanted params");
            if let Ok(v) = coerce_value(spec, &value) {
                bound.insert(name, v);
            }
        }
    }
    let missing: Vec<ParamSpec> = tool.required_params().filter(|p| !bound.contains_key(&p.name)).cloned().collect();
    if missing.is_empty() {
        Ok(FillOutcome::Bound(bound))
    } else {
        Ok(FillOutcome::Missing(missing))
    }
}
