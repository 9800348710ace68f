//! The reasoner interface and the deterministic rule-based reasoner.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::tools::{ToolCall, ToolResult};
use super::{AgentConfig, Subtask, SubtaskFindings};
use crate::analysis::{AllocSite, EvidenceReport, FindingValue};
use crate::constraints::{Confidence, ConstraintBundle, ConstraintEstimate, Dimension, NO_EVIDENCE_DISK_GB};
use crate::records::HistoryEvidence;
use crate::selector::PreferenceItem;
use crate::similarity::MatchOutcome;
use crate::submission::{ArtifactRole, JobSpec, WorkloadKind};

/// Extra headroom applied to a measured peak from a similar successful run.
pub const MEASURED_PEAK_FACTOR: f64 = 1.1;
/// Multiple of the largest OOM'd instance memory taken as a lower bound.
pub const OOM_GROWTH_FACTOR: f64 = 2.0;
/// Inputs are assumed to need this multiple of their size on local disk.
pub const INPUT_DISK_FACTOR: f64 = 2.0;

/// Source prefix marking a memory finding measured on a prior run. Such
/// findings outrank static estimates at synthesis.
pub const MEASURED_SOURCE_PREFIX: &str = "history:measured";

/// What a reasoner knows about the job before calling any tool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobDigest {
    pub workload_kind: Option<WorkloadKind>,
    pub entry: Option<PathBuf>,
    pub evidence: Vec<PathBuf>,
    pub source_roots: Vec<PathBuf>,
    pub env: BTreeMap<String, String>,
    pub args: Vec<String>,
    pub history_available: bool,
    /// Set for instance selection: the stage-one result.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<ConstraintBundle>,
}

impl JobDigest {
    pub fn from_job(job: &JobSpec, history_available: bool) -> Self {
        JobDigest {
            workload_kind: Some(job.workload_kind),
            entry: Some(job.entry_path.clone()),
            evidence: job.artifacts(ArtifactRole::EvidenceFile).map(PathBuf::from).collect(),
            source_roots: job.artifacts(ArtifactRole::SourceTree).map(PathBuf::from).collect(),
            env: job.invocation.env.clone(),
            args: job.invocation.args.clone(),
            history_available,
            bundle: None,
        }
    }

    pub fn for_selection(bundle: ConstraintBundle) -> Self {
        JobDigest {
            bundle: Some(bundle),
            ..JobDigest::default()
        }
    }

    fn entry_str(&self) -> String {
        self.entry.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }

    fn call_graph_file(&self) -> Option<String> {
        self.evidence
            .iter()
            .find(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".cfg.json")))
            .map(|p| p.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub call: ToolCall,
    pub result: ToolResult,
    pub cached: bool,
}

/// Everything a reasoner sees when choosing its next step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub config: &'a AgentConfig,
    pub subtask: &'a Subtask,
    pub digest: &'a JobDigest,
    pub observations: &'a [Observation],
    pub prior: &'a [SubtaskFindings],
    pub tools: &'a [Value],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Call(ToolCall),
    Finish {
        findings: EvidenceReport,
        structured: BTreeMap<String, Value>,
        notes: Vec<String>,
    },
}

pub trait Reasoner {
    fn name(&self) -> &str;

    /// A decomposition of the task, or `None` to use the fixed one.
    fn propose_decomposition(&mut self, config: &AgentConfig, digest: &JobDigest) -> Option<Vec<Subtask>> {
        let _ = (config, digest);
        None
    }

    fn next_action(&mut self, ctx: &StepContext<'_>) -> Action;

    /// Findings recoverable from the observations so far, used when a
    /// budget runs out before the reasoner finishes.
    fn best_effort(&mut self, ctx: &StepContext<'_>) -> EvidenceReport {
        let _ = ctx;
        EvidenceReport::default()
    }

    /// Raw exchanges, for logging.
    fn transcript(&self) -> Vec<Value> {
        Vec::new()
    }
}

/// Deterministic reasoner: a fixed tool plan per dimension group, with
/// findings read straight off tool results.
#[derive(Debug, Clone, Default)]
pub struct RuleBasedReasoner;

impl Reasoner for RuleBasedReasoner {
    fn name(&self) -> &str {
        "rules"
    }

    fn next_action(&mut self, ctx: &StepContext<'_>) -> Action {
        let issued: BTreeSet<String> = ctx.observations.iter().map(|o| o.call.cache_key()).collect();
        if let Some(call) = plan(ctx).into_iter().find(|c| !issued.contains(&c.cache_key())) {
            return Action::Call(call);
        }
        let (findings, structured, notes) = interpret(ctx);
        Action::Finish {
            findings,
            structured,
            notes,
        }
    }

    fn best_effort(&mut self, ctx: &StepContext<'_>) -> EvidenceReport {
        interpret(ctx).0
    }
}

fn targets(ctx: &StepContext<'_>, dim: &str) -> bool {
    ctx.subtask.target_dimensions.iter().any(|d| d == dim)
}

fn latest<'a>(ctx: &StepContext<'a>, tool: &str) -> Option<&'a Observation> {
    ctx.observations.iter().rev().find(|o| o.call.tool == tool)
}

fn latest_ok<'a>(ctx: &StepContext<'a>, tool: &str) -> Option<&'a Value> {
    latest(ctx, tool).filter(|o| o.result.is_ok()).map(|o| &o.result.payload)
}

/// Calls still worth making, given what has been observed.
fn plan(ctx: &StepContext<'_>) -> Vec<ToolCall> {
    let d = ctx.digest;
    if let Some(bundle) = &d.bundle {
        return selection_plan(ctx, bundle);
    }
    let entry = d.entry_str();
    let path = json!({ "path": entry });
    let kind = d.workload_kind;
    let compiled = kind == Some(WorkloadKind::CompiledBinary);
    let mut calls = Vec::new();

    if targets(ctx, "platform") || targets(ctx, "isa_features") {
        match kind {
            Some(WorkloadKind::CompiledBinary) => {
                calls.push(ToolCall::new("read_elf", path.clone()));
                calls.push(ToolCall::new("detect_isa", path.clone()));
            }
            Some(WorkloadKind::InterpretedEntryPoint) => calls.push(ToolCall::new("scan_imports", path.clone())),
            _ => {}
        }
    }
    if targets(ctx, "cpu_count") && kind.is_some() {
        calls.push(ToolCall::new("detect_parallelism", path.clone()));
    }
    if targets(ctx, "mem_hwm_gb") {
        if d.history_available {
            calls.push(ToolCall::new("similar_jobs", json!({})));
        }
        if compiled {
            match d.call_graph_file() {
                Some(cfg) => {
                    let graph_call = ToolCall::new("read_call_graph", json!({"path": cfg, "root": "main"}));
                    calls.push(graph_call);
                    match latest(ctx, "read_call_graph") {
                        None => {}
                        Some(o) => match o.result.payload.get("reachable").filter(|_| o.result.is_ok()) {
                            Some(reachable) => calls.push(ToolCall::new(
                                "extract_allocations",
                                json!({"path": entry, "reachable": reachable}),
                            )),
                            None => calls.push(ToolCall::new("extract_allocations", path.clone())),
                        },
                    }
                }
                None => calls.push(ToolCall::new("extract_allocations", path.clone())),
            }
        }
    }
    if ["gpu_required", "gpu_count", "gpu_mem_gb", "io_intensity"].iter().any(|t| targets(ctx, t)) && kind.is_some() {
        calls.push(ToolCall::new("detect_accel_io", path.clone()));
    }
    if targets(ctx, "disk_gb") {
        calls.push(ToolCall::new("measure_inputs", json!({})));
    }
    calls
}

fn selection_plan(ctx: &StepContext<'_>, bundle: &ConstraintBundle) -> Vec<ToolCall> {
    let b = bundle.to_json();
    let mut calls = vec![ToolCall::new("filter_feasible", json!({"bundle": b}))];
    let feasible = latest_ok(ctx, "filter_feasible").and_then(|v| v["count"].as_u64());
    if feasible.is_some_and(|n| n > 0) {
        calls.push(ToolCall::new("rank_instances", json!({"bundle": b})));
        if let Some(ranked) = latest_ok(ctx, "rank_instances") {
            calls.push(ToolCall::new("validate_preferences", json!({"bundle": b, "items": ranked["items"]})));
        }
    }
    calls
}

type Interpretation = (EvidenceReport, BTreeMap<String, Value>, Vec<String>);

fn interpret(ctx: &StepContext<'_>) -> Interpretation {
    let mut report = EvidenceReport::default();
    let mut structured = BTreeMap::new();
    let mut notes = Vec::new();
    if ctx.digest.bundle.is_some() {
        interpret_selection(ctx, &mut structured, &mut notes);
        return (report, structured, notes);
    }
    let kind = ctx.digest.workload_kind;
    if targets(ctx, "platform") || targets(ctx, "isa_features") {
        interpret_platform(ctx, kind, &mut report);
    }
    if targets(ctx, "cpu_count") {
        if let Some(est) = estimate::<u32>(ctx, "detect_parallelism", &mut notes) {
            push_estimate(&mut report, Dimension::CpuCount, f64::from(est.value).into(), &est, "detect_parallelism");
        }
    }
    if targets(ctx, "mem_hwm_gb") {
        interpret_memory(ctx, &mut report, &mut notes);
    }
    interpret_accel_io(ctx, &mut report, &mut notes);
    if targets(ctx, "disk_gb") {
        interpret_disk(ctx, &mut report);
    }
    (report, structured, notes)
}

fn estimate<T: serde::de::DeserializeOwned>(ctx: &StepContext<'_>, tool: &str, notes: &mut Vec<String>) -> Option<ConstraintEstimate<T>> {
    let o = latest(ctx, tool)?;
    if !o.result.is_ok() {
        notes.push(format!("{tool} failed: {}", payload_text(&o.result.payload)));
        return None;
    }
    serde_json::from_value(o.result.payload.clone()).ok()
}

fn payload_text(v: &Value) -> String {
    v.as_str().map(String::from).unwrap_or_else(|| v.to_string())
}

fn push_estimate<V>(report: &mut EvidenceReport, dim: Dimension, value: FindingValue, est: &ConstraintEstimate<V>, tool: &str) {
    report.push(dim, value, est.confidence, tool, est.rationale.clone());
}

fn interpret_platform(ctx: &StepContext<'_>, kind: Option<WorkloadKind>, report: &mut EvidenceReport) {
    match kind {
        Some(WorkloadKind::CompiledBinary) => {
            if targets(ctx, "platform") {
                match latest(ctx, "read_elf") {
                    Some(o) if o.result.is_ok() => {
                        let machine = o.result.payload["machine"].as_str().unwrap_or("");
                        let (value, conf) = match machine {
                            "x86_64" | "aarch64" => (machine, Confidence::High),
                            _ => ("any", Confidence::Low),
                        };
                        report.push(Dimension::Platform, value, conf, "read_elf", format!("ELF e_machine is {machine}"));
                    }
                    Some(o) => report.push(
                        Dimension::Platform,
                        "any",
                        Confidence::Low,
                        "read_elf",
                        format!("ELF header unreadable: {}", payload_text(&o.result.payload)),
                    ),
                    None => {}
                }
            }
            if targets(ctx, "isa_features") {
                match latest(ctx, "detect_isa") {
                    Some(o) if o.result.is_ok() => {
                        let features: Vec<String> = o.result.payload["features"]
                            .as_array()
                            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
                            .unwrap_or_default();
                        let n = o.result.payload["instructions"].as_u64().unwrap_or(0);
                        let (conf, detail) = if features.is_empty() {
                            (Confidence::Medium, format!("no vector extension instructions among {n} disassembled instructions"))
                        } else {
                            (Confidence::High, format!("instructions using {} found among {n} disassembled", features.join(", ")))
                        };
                        report.push(Dimension::IsaFeatures, features.join(","), conf, "detect_isa", detail);
                    }
                    Some(o) => report.push(
                        Dimension::IsaFeatures,
                        "",
                        Confidence::Low,
                        "detect_isa",
                        format!("no disassembly: {}", payload_text(&o.result.payload)),
                    ),
                    None => {}
                }
            }
        }
        Some(WorkloadKind::InterpretedEntryPoint) => {
            if latest_ok(ctx, "scan_imports").is_some() {
                let detail = "interpreted entry point runs on any architecture with an interpreter";
                if targets(ctx, "platform") {
                    report.push(Dimension::Platform, "any", Confidence::Medium, "scan_imports", detail);
                }
                if targets(ctx, "isa_features") {
                    report.push(
                        Dimension::IsaFeatures,
                        "",
                        Confidence::Medium,
                        "scan_imports",
                        "interpreted code carries no vector ISA requirement of its own",
                    );
                }
            }
        }
        _ => {}
    }
}

fn interpret_memory(ctx: &StepContext<'_>, report: &mut EvidenceReport, notes: &mut Vec<String>) {
    if let Some(history) = latest_ok(ctx, "similar_jobs") {
        let matches: Vec<HistoryEvidence> = serde_json::from_value(history.clone()).unwrap_or_default();
        let measured: Vec<(&str, f64)> = matches
            .iter()
            .filter(|m| m.outcome == MatchOutcome::Success)
            .filter_map(|m| m.measured_peak_gb.map(|p| (m.job_id.as_str(), p)))
            .collect();
        if let Some(&(_, peak)) = measured.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
            let ids: Vec<&str> = measured.iter().map(|m| m.0).collect();
            report.push(
                Dimension::MemHwmGb,
                peak * MEASURED_PEAK_FACTOR,
                Confidence::High,
                &format!("{MEASURED_SOURCE_PREFIX}:{}", ids.join(",")),
                format!("similar successful run peaked at {peak:.3} GB; x{MEASURED_PEAK_FACTOR} headroom"),
            );
        } else if let Some(m) = matches
            .iter()
            .filter(|m| m.largest_oom_memory_gb.is_some())
            .max_by(|a, b| a.largest_oom_memory_gb.unwrap_or(0.0).total_cmp(&b.largest_oom_memory_gb.unwrap_or(0.0)))
        {
            let t = m.largest_oom_memory_gb.unwrap_or_default();
            report.push(
                Dimension::MemHwmGb,
                t * OOM_GROWTH_FACTOR,
                Confidence::High,
                &format!("history:oom:{}", m.job_id),
                format!("similar run {} was killed for memory on a {t} GB instance", m.job_id),
            );
        }
    }
    match latest(ctx, "extract_allocations") {
        Some(o) if !o.result.is_ok() => {
            notes.push(format!("extract_allocations failed: {}", payload_text(&o.result.payload)));
        }
        Some(o) => {
            let p = &o.result.payload;
            if let Ok(mut est) = serde_json::from_value::<ConstraintEstimate<f64>>(p["estimate"].clone()) {
                let sites: Vec<AllocSite> = serde_json::from_value(p["sites"].clone()).unwrap_or_default();
                // Without reachability an allocation may sit in dead code: at most medium.
                if p["filtered"] != json!(true) && est.confidence == Confidence::High {
                    est.confidence = Confidence::Medium;
                    est.rationale.push_str("; reachability not verified");
                }
                est.rationale.push_str(&format!(" ({} allocation site(s) seen)", sites.len()));
                push_estimate(report, Dimension::MemHwmGb, est.value.into(), &est, "extract_allocations");
            }
        }
        None => {}
    }
}

fn interpret_accel_io(ctx: &StepContext<'_>, report: &mut EvidenceReport, notes: &mut Vec<String>) {
    let wanted = ["gpu_required", "gpu_count", "gpu_mem_gb", "io_intensity"];
    if !wanted.iter().any(|t| targets(ctx, t)) {
        return;
    }
    let Some(o) = latest(ctx, "detect_accel_io") else { return };
    if !o.result.is_ok() {
        notes.push(format!("detect_accel_io failed: {}", payload_text(&o.result.payload)));
        return;
    }
    let p = &o.result.payload;
    let field = |name: &str| serde_json::from_value::<ConstraintEstimate<Value>>(p[name].clone()).ok();
    for (name, dim) in [
        ("gpu_required", Dimension::GpuRequired),
        ("gpu_count", Dimension::GpuCount),
        ("gpu_mem_gb", Dimension::GpuMemGb),
        ("io_intensity", Dimension::IoIntensity),
    ] {
        if !targets(ctx, name) {
            continue;
        }
        if let Some(est) = field(name) {
            let value = match &est.value {
                Value::Number(n) => FindingValue::Number(n.as_f64().unwrap_or(0.0)),
                Value::Bool(b) => FindingValue::Text(b.to_string()),
                other => FindingValue::Text(payload_text(other)),
            };
            push_estimate(report, dim, value, &est, "detect_accel_io");
        }
    }
}

fn interpret_disk(ctx: &StepContext<'_>, report: &mut EvidenceReport) {
    let Some(p) = latest_ok(ctx, "measure_inputs") else { return };
    let bytes = p["total_bytes"].as_u64().unwrap_or(0);
    let files = p["files"].as_array().map_or(0, Vec::len);
    let gb = bytes as f64 / crate::num::GIB as f64;
    let value = NO_EVIDENCE_DISK_GB.max(INPUT_DISK_FACTOR * gb);
    if files == 0 {
        report.push(
            Dimension::DiskGb,
            value,
            Confidence::Low,
            "measure_inputs",
            "no input files named on the command line",
        );
    } else {
        report.push(
            Dimension::DiskGb,
            value,
            Confidence::Medium,
            "measure_inputs",
            format!("{files} input file(s) totalling {gb:.3} GB; x{INPUT_DISK_FACTOR} for outputs and scratch, at least {NO_EVIDENCE_DISK_GB} GB"),
        );
    }
}

fn interpret_selection(ctx: &StepContext<'_>, structured: &mut BTreeMap<String, Value>, notes: &mut Vec<String>) {
    if !targets(ctx, "items") {
        return;
    }
    if latest_ok(ctx, "filter_feasible").and_then(|v| v["count"].as_u64()) == Some(0) {
        notes.push("no catalog offer satisfies the hard constraints".into());
        structured.insert("items".into(), json!([]));
        return;
    }
    let Some(ranked) = latest_ok(ctx, "rank_instances") else { return };
    let mut items: Vec<PreferenceItem> = serde_json::from_value(ranked["items"].clone()).unwrap_or_default();
    if let Some(v) = latest_ok(ctx, "validate_preferences") {
        let bad: BTreeSet<usize> = v["violations"]
            .as_array()
            .map(|a| a.iter().filter_map(|x| x["rank"].as_u64()).map(|r| r as usize).collect())
            .unwrap_or_default();
        if !bad.is_empty() {
            notes.push(format!("dropped {} ranked offer(s) with violations", bad.len()));
        }
        items.retain(|i| !bad.contains(&i.rank));
    }
    for (i, item) in items.iter_mut().enumerate() {
        item.rank = i + 1;
    }
    structured.insert("items".into(), serde_json::to_value(items).expect("items serialize"));
}
