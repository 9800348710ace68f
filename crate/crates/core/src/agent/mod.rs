//! The two-stage orchestration harness: decompose a task into subtasks, run
//! a reason/act/observe loop per subtask over a shared tool cache, and
//! merge the findings into a schema-validated document.
//!
//! The reasoner is pluggable. [`RuleBasedReasoner`] is deterministic and
//! needs nothing external; [`RemoteReasoner`] speaks a chat-completion
//! HTTP contract.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::EvidenceReport;

mod pipeline;
mod reasoner;
mod remote;
mod synth;
pub mod tools;

pub use pipeline::{
    decompose, finalize_bundle, fixed_decomposition, run_pipeline, run_stage, run_subtask, validate_decomposition, PipelineOptions,
    PipelineOutput, PipelineStats, StageOutput,
};
pub use reasoner::{Action, JobDigest, Observation, Reasoner, RuleBasedReasoner, StepContext, MEASURED_PEAK_FACTOR, OOM_GROWTH_FACTOR};
pub use remote::{RemoteReasoner, ENDPOINT_ENV, MODEL_ENV, API_KEY_ENV};
pub use synth::synthesize;
pub use tools::{JobContext, Tool, ToolCall, ToolCache, ToolResult, ToolRunner, ToolStatus};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("decomposition invalid: {0}")]
    DecompositionInvalid(String),
    #[error("synthesized output violates the schema: {}", .0.join("; "))]
    SchemaViolation(Vec<String>),
    #[error("instance type {name} does not exist in the catalog{}", provider.as_ref().map(|p| format!(" for provider {p}")).unwrap_or_default())]
    NonexistentInstance { provider: Option<String>, name: String },
    #[error(transparent)]
    Selector(#[from] crate::selector::SelectorError),
    #[error(transparent)]
    Records(#[from] crate::records::RecordsError),
    #[error("remote reasoner: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub max_iterations_per_subtask: u32,
    pub max_total_tool_calls: u32,
    pub per_tool_timeout_s: f64,
    /// Approximate tokens; characters / 4 for reasoners that do not count.
    pub token_budget: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            max_iterations_per_subtask: 12,
            max_total_tool_calls: 120,
            per_tool_timeout_s: 60.0,
            token_budget: 200_000,
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations_per_subtask == 0 || self.max_total_tool_calls == 0 || self.token_budget == 0 {
            return Err("budgets must be positive".into());
        }
        if !(self.per_tool_timeout_s > 0.0 && self.per_tool_timeout_s.is_finite()) {
            return Err("per-tool timeout must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub name: String,
    pub driver_prompt: String,
    pub output_schema: Value,
    pub budgets: Budgets,
    pub tool_registry: Vec<String>,
}

const CONSTRAINT_ESTIMATION: &str = include_str!("../../../../configs/constraint-estimation.json");
const INSTANCE_SELECTION: &str = include_str!("../../../../configs/instance-selection.json");

impl AgentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, AgentError> {
        let cfg: AgentConfig = serde_json::from_str(text).map_err(|e| AgentError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::InvalidConfig(format!("{}: {e}", path.display())))?;
        AgentConfig::from_json_str(&text)
    }

    /// The shipped stage-one config.
    pub fn constraint_estimation() -> Self {
        AgentConfig::from_json_str(CONSTRAINT_ESTIMATION).expect("shipped config is valid")
    }

    /// The shipped stage-two config.
    pub fn instance_selection() -> Self {
        AgentConfig::from_json_str(INSTANCE_SELECTION).expect("shipped config is valid")
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.tool_registry.is_empty() {
            return Err(AgentError::InvalidConfig("tool registry is empty".into()));
        }
        self.budgets.validate().map_err(AgentError::InvalidConfig)?;
        jsonschema::JSONSchema::compile(&self.output_schema)
            .map_err(|e| AgentError::InvalidConfig(format!("output schema: {e}")))?;
        if self.output_schema.get("properties").and_then(Value::as_object).is_none() {
            return Err(AgentError::InvalidConfig("output schema has no properties".into()));
        }
        Ok(())
    }

    /// Output fields the agent must fill, in schema order. Fields fixed by
    /// `const` are filled by synthesis directly.
    pub fn dimensions(&self) -> Vec<String> {
        self.output_schema["properties"]
            .as_object()
            .map(|props| {
                props
                    .iter()
                    .filter(|(_, s)| s.get("const").is_none())
                    .map(|(k, _)| k.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn property_schema(&self, name: &str) -> Option<&Value> {
        self.output_schema.get("properties")?.get(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: u32,
    pub description: String,
    pub target_dimensions: Vec<String>,
    #[serde(default)]
    pub depends_on: Vec<u32>,
}

/// Findings of one subtask.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubtaskFindings {
    pub subtask_id: u32,
    pub report: EvidenceReport,
    /// Whole output fields produced directly, keyed by schema property.
    #[serde(default)]
    pub structured: BTreeMap<String, Value>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub tool_calls: u32,
    pub budget_exhausted: bool,
}

pub type Findings = Vec<SubtaskFindings>;
