//! A reasoner backed by an OpenAI-style chat-completion endpoint.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::reasoner::{Action, JobDigest, Reasoner, StepContext};
use super::tools::ToolCall;
use super::{AgentConfig, AgentError, Subtask};
use crate::analysis::{EvidenceReport, FindingValue};
use crate::constraints::{Confidence, Dimension};

pub const ENDPOINT_ENV: &str = "INCISOR_REASONER_ENDPOINT";
pub const MODEL_ENV: &str = "INCISOR_REASONER_MODEL";
pub const API_KEY_ENV: &str = "INCISOR_REASONER_API_KEY";

/// Source recorded on findings the remote model reports directly.
const REMOTE_SOURCE: &str = "reasoner";

pub struct RemoteReasoner {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    transcript: Vec<Value>,
}

impl RemoteReasoner {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        RemoteReasoner {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
            transcript: Vec::new(),
        }
    }

    /// Reads the endpoint, model and key from the environment.
    pub fn from_env() -> Result<Self, AgentError> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| AgentError::Remote(format!("{ENDPOINT_ENV} is not set")))?;
        let model = std::env::var(MODEL_ENV).unwrap_or_else(|_| "default".into());
        Ok(RemoteReasoner::new(endpoint, model, std::env::var(API_KEY_ENV).ok()))
    }

    fn complete(&mut self, system: &str, user: &Value) -> Result<Value, String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user.to_string()},
            ],
        });
        let mut req = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let reply: Value = req
            .send_json(body.clone())
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())?;
        let content = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or("reply has no choices[0].message.content")?
            .to_string();
        self.transcript.push(json!({"request": body["messages"][1]["content"], "reply": content}));
        serde_json::from_str(strip_fences(&content)).map_err(|e| format!("reply is not JSON: {e}"))
    }
}

/// Drops a surrounding ``` fence, with or without a language tag.
fn strip_fences(s: &str) -> &str {
    let t = s.trim();
    match t.strip_prefix("```") {
        Some(rest) => {
            let rest = rest.split_once('\n').map_or("", |(_, body)| body);
            rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
        }
        None => t,
    }
}

fn parse_findings(v: &Value) -> (EvidenceReport, Vec<String>) {
    let mut report = EvidenceReport::default();
    let mut notes = Vec::new();
    for f in v.as_array().into_iter().flatten() {
        let dim = f["dimension"].as_str().and_then(Dimension::parse);
        let conf: Option<Confidence> = serde_json::from_value(f["confidence"].clone()).ok();
        let value = match &f["value"] {
            Value::Number(n) => n.as_f64().map(FindingValue::Number),
            Value::String(s) => Some(FindingValue::Text(s.clone())),
            Value::Bool(b) => Some(FindingValue::Text(b.to_string())),
            Value::Array(items) => Some(FindingValue::Text(
                items.iter().filter_map(Value::as_str).collect::<Vec<_>>().join(","),
            )),
            _ => None,
        };
        match (dim, conf, value) {
            (Some(d), Some(c), Some(v)) => {
                let detail = f["detail"].as_str().filter(|s| !s.is_empty()).unwrap_or("reported by the reasoner");
                report.push(d, v, c, REMOTE_SOURCE, detail);
            }
            _ => notes.push(format!("ignored malformed finding {f}")),
        }
    }
    (report, notes)
}

impl Reasoner for RemoteReasoner {
    fn name(&self) -> &str {
        "remote"
    }

    fn propose_decomposition(&mut self, config: &AgentConfig, digest: &JobDigest) -> Option<Vec<Subtask>> {
        let user = json!({
            "request": "decompose",
            "dimensions": config.dimensions(),
            "job": digest,
        });
        let reply = self.complete(&config.driver_prompt, &user).ok()?;
        serde_json::from_value(reply.get("subtasks")?.clone()).ok()
    }

    fn next_action(&mut self, ctx: &StepContext<'_>) -> Action {
        let user = json!({
            "subtask": ctx.subtask,
            "job": ctx.digest,
            "tools": ctx.tools,
            "observations": ctx.observations,
            "prior_findings": ctx.prior.iter().map(|p| &p.report).collect::<Vec<_>>(),
        });
        let reply = match self.complete(&ctx.config.driver_prompt, &user) {
            Ok(r) => r,
            Err(e) => {
                return Action::Finish {
                    findings: EvidenceReport::default(),
                    structured: BTreeMap::new(),
                    notes: vec![format!("remote reasoner failed: {e}")],
                }
            }
        };
        match reply["action"].as_str() {
            Some("call") => Action::Call(ToolCall::new(
                reply["tool"].as_str().unwrap_or_default(),
                reply.get("args").cloned().unwrap_or(Value::Null),
            )),
            _ => {
                let (findings, mut notes) = parse_findings(&reply["findings"]);
                notes.extend(reply["notes"].as_array().into_iter().flatten().filter_map(|n| n.as_str().map(String::from)));
                let structured = reply["structured"]
                    .as_object()
                    .map(|o| o.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
                    .unwrap_or_default();
                Action::Finish {
                    findings,
                    structured,
                    notes,
                }
            }
        }
    }

    fn transcript(&self) -> Vec<Value> {
        self.transcript.clone()
    }
}
