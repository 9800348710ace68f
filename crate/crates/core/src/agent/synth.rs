//! Merges subtask findings into one output document, resolving conflicts
//! by confidence and then by each property's conservative order.

use std::collections::BTreeSet;

use serde_json::{json, Map, Value};

use super::reasoner::MEASURED_SOURCE_PREFIX;
use super::{AgentConfig, AgentError, SubtaskFindings};
use crate::analysis::{Finding, FindingValue};
use crate::constraints::Confidence;

/// Builds the output document for `config` from `findings` and validates
/// it against the output schema.
pub fn synthesize(findings: &[SubtaskFindings], config: &AgentConfig) -> Result<Value, AgentError> {
    let mut doc = Map::new();
    let props = config.output_schema["properties"].as_object().cloned().unwrap_or_default();
    for (name, schema) in &props {
        if let Some(c) = schema.get("const") {
            doc.insert(name.clone(), c.clone());
            continue;
        }
        // whole fields produced directly: the latest subtask wins
        if let Some(v) = findings.iter().rev().find_map(|f| f.structured.get(name)) {
            doc.insert(name.clone(), v.clone());
            continue;
        }
        let relevant: Vec<&Finding> = findings
            .iter()
            .flat_map(|f| f.report.findings.iter())
            .filter(|f| f.dimension.as_str() == name)
            .collect();
        let value = if relevant.is_empty() {
            default_for(schema)
        } else {
            merge_dimension(name, schema, &relevant)?
        };
        doc.insert(name.clone(), value);
    }
    let doc = Value::Object(doc);
    check_schema(&config.output_schema, &doc)?;
    Ok(doc)
}

fn is_estimate(schema: &Value) -> bool {
    schema.pointer("/properties/value").is_some()
}

fn default_for(schema: &Value) -> Value {
    let default = schema.get("x-default").cloned().unwrap_or(Value::Null);
    if is_estimate(schema) {
        json!({
            "value": default,
            "confidence": "low",
            "rationale": "no evidence; default",
            "evidence_refs": [],
        })
    } else {
        default
    }
}

fn value_type(schema: &Value) -> &str {
    let v = schema.pointer("/properties/value").unwrap_or(&Value::Null);
    match v.get("type").and_then(Value::as_str) {
        Some(t) => t,
        None if v.get("enum").is_some() => {
            if v["enum"].as_array().is_some_and(|e| e.iter().all(Value::is_boolean)) {
                "boolean"
            } else {
                "string"
            }
        }
        None => "string",
    }
}

/// Converts a finding value into the JSON type the property expects.
fn to_json(value: &FindingValue, ty: &str) -> Result<Value, String> {
    match (ty, value) {
        ("number", FindingValue::Number(n)) => Ok(json!(n)),
        ("integer", FindingValue::Number(n)) => {
            if n.is_finite() && *n >= 0.0 {
                Ok(json!(n.ceil() as u64))
            } else {
                Err(format!("{n} is not a count"))
            }
        }
        ("number" | "integer", FindingValue::Text(t)) => {
            let n: f64 = t.trim().parse().map_err(|_| format!("`{t}` is not a number"))?;
            to_json(&FindingValue::Number(n), ty)
        }
        ("boolean", FindingValue::Text(t)) => match t.trim() {
            "true" => Ok(json!(true)),
            "false" => Ok(json!(false)),
            other => Err(format!("`{other}` is not a boolean")),
        },
        ("boolean", FindingValue::Number(n)) => Ok(json!(*n != 0.0)),
        ("array", FindingValue::Text(t)) => Ok(Value::Array(
            t.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| json!(s))
                .collect(),
        )),
        (_, FindingValue::Text(t)) => Ok(json!(t)),
        (_, FindingValue::Number(n)) => Ok(json!(n.to_string())),
    }
}

fn position(order: &[Value], v: &Value) -> Option<usize> {
    order.iter().position(|o| o == v)
}

fn merge_dimension(name: &str, schema: &Value, relevant: &[&Finding]) -> Result<Value, AgentError> {
    let measured: Vec<&Finding> = relevant
        .iter()
        .copied()
        .filter(|f| f.source.starts_with(MEASURED_SOURCE_PREFIX))
        .collect();
    let pool: Vec<&Finding> = if measured.is_empty() { relevant.to_vec() } else { measured };
    let top: Confidence = pool.iter().map(|f| f.confidence).max().expect("pool is non-empty");
    let chosen: Vec<&Finding> = pool.into_iter().filter(|f| f.confidence == top).collect();

    let ty = value_type(schema);
    let mut values = Vec::new();
    for f in &chosen {
        let v = to_json(&f.value, ty).map_err(|e| AgentError::SchemaViolation(vec![format!("{name}: {e}")]))?;
        values.push(v);
    }
    let rule = schema.get("x-conservative").cloned().unwrap_or(json!("max"));
    let mut value = match (&rule, rule.get("order").and_then(Value::as_array)) {
        (_, Some(order)) => values
            .iter()
            .max_by_key(|v| position(order, v).map_or(0, |p| p + 1))
            .cloned()
            .unwrap_or(Value::Null),
        (Value::String(s), _) if s == "union" => {
            let set: BTreeSet<String> = values
                .iter()
                .flat_map(|v| v.as_array().cloned().unwrap_or_default())
                .filter_map(|v| v.as_str().map(String::from))
                .collect();
            json!(set)
        }
        _ => values
            .iter()
            .max_by(|a, b| a.as_f64().unwrap_or(f64::MIN).total_cmp(&b.as_f64().unwrap_or(f64::MIN)))
            .cloned()
            .unwrap_or(Value::Null),
    };

    let mut details: Vec<String> = Vec::new();
    for f in &chosen {
        if !details.contains(&f.detail) {
            details.push(f.detail.clone());
        }
    }
    if let (Some(floor), Some(v)) = (schema.get("x-floor").and_then(Value::as_f64), value.as_f64()) {
        if v < floor {
            details.push(format!("raised from {v} to the floor of {floor}"));
            value = json!(floor);
        }
    }
    let mut refs: Vec<String> = Vec::new();
    for f in &chosen {
        if !refs.contains(&f.source) {
            refs.push(f.source.clone());
        }
    }
    if is_estimate(schema) {
        Ok(json!({
            "value": value,
            "confidence": top,
            "rationale": details.join("; "),
            "evidence_refs": refs,
        }))
    } else {
        Ok(value)
    }
}

fn check_schema(schema: &Value, doc: &Value) -> Result<(), AgentError> {
    let compiled = jsonschema::JSONSchema::compile(schema).map_err(|e| AgentError::InvalidConfig(e.to_string()))?;
    let result = compiled.validate(doc);
    if let Err(errors) = result {
        let list: Vec<String> = errors.map(|e| format!("{}: {e}", e.instance_path)).collect();
        return Err(AgentError::SchemaViolation(list));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::EvidenceReport;
    use crate::constraints::{ConstraintBundle, Dimension};

    fn sub(id: u32, report: EvidenceReport) -> SubtaskFindings {
        SubtaskFindings {
            subtask_id: id,
            report,
            ..SubtaskFindings::default()
        }
    }

    #[test]
    fn empty_findings_give_schema_defaults() {
        let cfg = AgentConfig::constraint_estimation();
        let doc = synthesize(&[], &cfg).unwrap();
        let bundle = ConstraintBundle::from_json(&doc).unwrap();
        let reference = ConstraintBundle::no_evidence();
        assert_eq!(bundle.summary(), reference.summary());
        for (d, c, r) in bundle.rationales() {
            assert_eq!(c, Confidence::Low, "{d}");
            assert_eq!(r, "no evidence; default");
        }
    }

    #[test]
    fn conflicts_resolve_by_confidence_then_conservatism() {
        let cfg = AgentConfig::constraint_estimation();
        let mut a = EvidenceReport::default();
        a.push(Dimension::MemHwmGb, 8.0, Confidence::Medium, "s1", "a");
        a.push(Dimension::MemHwmGb, 30.0, Confidence::Low, "s2", "b");
        a.push(Dimension::MemHwmGb, 12.0, Confidence::Medium, "s3", "c");
        a.push(Dimension::IsaFeatures, "avx", Confidence::High, "s4", "d");
        a.push(Dimension::IsaFeatures, "avx2,avx", Confidence::High, "s5", "e");
        a.push(Dimension::Platform, "any", Confidence::High, "s6", "f");
        a.push(Dimension::Platform, "x86_64", Confidence::High, "s7", "g");
        let doc = synthesize(&[sub(1, a)], &cfg).unwrap();
        assert_eq!(doc["mem_hwm_gb"]["value"], json!(12.0));
        assert_eq!(doc["mem_hwm_gb"]["confidence"], json!("medium"));
        assert_eq!(doc["mem_hwm_gb"]["evidence_refs"], json!(["s1", "s3"]));
        assert_eq!(doc["isa_features"]["value"], json!(["avx", "avx2"]));
        assert_eq!(doc["platform"]["value"], json!("x86_64"));
    }

    #[test]
    fn measured_history_outranks_static_estimates() {
        let cfg = AgentConfig::constraint_estimation();
        let mut a = EvidenceReport::default();
        a.push(Dimension::MemHwmGb, 40.0, Confidence::High, "extract_allocations", "static");
        a.push(Dimension::MemHwmGb, 11.0, Confidence::High, "history:measured:j1", "measured");
        let doc = synthesize(&[sub(1, a)], &cfg).unwrap();
        assert_eq!(doc["mem_hwm_gb"]["value"], json!(11.0));
    }

    #[test]
    fn floor_and_type_errors() {
        let cfg = AgentConfig::constraint_estimation();
        let mut a = EvidenceReport::default();
        a.push(Dimension::MemHwmGb, 0.25, Confidence::Medium, "s", "tiny");
        let doc = synthesize(&[sub(1, a)], &cfg).unwrap();
        assert_eq!(doc["mem_hwm_gb"]["value"], json!(1.0));

        let mut bad = EvidenceReport::default();
        bad.push(Dimension::GpuRequired, "maybe", Confidence::Medium, "s", "?");
        assert!(matches!(synthesize(&[sub(1, bad)], &cfg), Err(AgentError::SchemaViolation(_))));

        let mut bad = EvidenceReport::default();
        bad.push(Dimension::Platform, "sparc", Confidence::Medium, "s", "?");
        assert!(matches!(synthesize(&[sub(1, bad)], &cfg), Err(AgentError::SchemaViolation(_))));
    }
}
