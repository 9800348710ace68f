//! Decomposition, the per-subtask loop, and the two-stage pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::reasoner::{Action, JobDigest, Observation, Reasoner, StepContext};
use super::synth::synthesize;
use super::tools::{constraint_tools, selection_tools, JobContext, Tool, ToolRunner};
use super::{AgentConfig, AgentError, Findings, Subtask, SubtaskFindings};
use crate::analysis::adapter::DisassemblerAdapter;
use crate::catalog::{filter_feasible, Catalog};
use crate::constraints::{
    apply_estimator_floor, close_isa, merge_with_overrides, validate_bundle, Confidence, ConstraintBundle,
};
use crate::records::HistoryEvidence;
use crate::selector::{drop_violations, rank_instances, InstancePreference, PreferenceList, SelectorError};
use crate::submission::JobSpec;

/// Dimension groups investigated together, in order. Each group builds on
/// the previous one.
const GROUPS: &[&[&str]] = &[
    &["platform", "isa_features"],
    &["cpu_count"],
    &["mem_hwm_gb"],
    &["gpu_required", "gpu_count", "gpu_mem_gb"],
    &["io_intensity"],
    &["disk_gb"],
];

#[derive(Clone)]
pub struct PipelineOptions {
    pub constraint_config: AgentConfig,
    pub selection_config: AgentConfig,
    pub disassembler: DisassemblerAdapter,
    /// Registered after the shipped tools, replacing any of the same name.
    pub extra_tools: Vec<Arc<dyn Tool>>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            constraint_config: AgentConfig::constraint_estimation(),
            selection_config: AgentConfig::instance_selection(),
            disassembler: DisassemblerAdapter::from_env(),
            extra_tools: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageOutput {
    pub stage: String,
    pub subtasks: Vec<Subtask>,
    pub findings: Findings,
    pub document: Value,
    pub tool_calls: u32,
    pub log: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineStats {
    pub tool_calls: u32,
    pub cache_hits: u32,
    pub executions: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineOutput {
    pub bundle: ConstraintBundle,
    pub preferences: Vec<InstancePreference>,
    /// The user named an instance type; no estimation or ranking ran.
    pub bypassed: bool,
    pub constraint_stage: Option<StageOutput>,
    pub selection_stage: Option<StageOutput>,
    pub log: Vec<String>,
    pub stats: PipelineStats,
    pub transcript: Vec<Value>,
}

/// One subtask per dimension group present in the schema, then one per
/// remaining schema dimension; each depends on its predecessor.
pub fn fixed_decomposition(config: &AgentConfig) -> Vec<Subtask> {
    let dims = config.dimensions();
    let mut covered = BTreeSet::new();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for g in GROUPS {
        let present: Vec<String> = g.iter().filter(|d| dims.iter().any(|x| x == *d)).map(|d| d.to_string()).collect();
        if !present.is_empty() {
            covered.extend(present.iter().cloned());
            groups.push(present);
        }
    }
    for d in &dims {
        if !covered.contains(d) {
            groups.push(vec![d.clone()]);
        }
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, dims)| {
            let id = i as u32 + 1;
            Subtask {
                id,
                description: format!("determine {}", dims.join(", ")),
                target_dimensions: dims,
                depends_on: if id > 1 { vec![id - 1] } else { Vec::new() },
            }
        })
        .collect()
}

/// Checks that `subtasks` covers every output dimension, names only known
/// ones, and forms a DAG. Returns them in dependency order.
pub fn validate_decomposition(subtasks: &[Subtask], config: &AgentConfig) -> Result<Vec<Subtask>, AgentError> {
    let invalid = |m: String| AgentError::DecompositionInvalid(m);
    if subtasks.is_empty() {
        return Err(invalid("no subtasks".into()));
    }
    let dims: BTreeSet<String> = config.dimensions().into_iter().collect();
    let ids: BTreeSet<u32> = subtasks.iter().map(|s| s.id).collect();
    if ids.len() != subtasks.len() {
        return Err(invalid("duplicate subtask ids".into()));
    }
    let mut covered = BTreeSet::new();
    for s in subtasks {
        if s.target_dimensions.is_empty() {
            return Err(invalid(format!("subtask {} targets nothing", s.id)));
        }
        for d in &s.target_dimensions {
            if !dims.contains(d) {
                return Err(invalid(format!("subtask {} targets unknown dimension `{d}`", s.id)));
            }
            covered.insert(d.clone());
        }
        if let Some(missing) = s.depends_on.iter().find(|d| !ids.contains(d)) {
            return Err(invalid(format!("subtask {} depends on missing subtask {missing}", s.id)));
        }
    }
    if let Some(missing) = dims.difference(&covered).next() {
        return Err(invalid(format!("dimension `{missing}` is not covered")));
    }

    // Kahn's algorithm, lowest id first among ready subtasks
    let mut done: BTreeSet<u32> = BTreeSet::new();
    let mut order = Vec::with_capacity(subtasks.len());
    while order.len() < subtasks.len() {
        let next = subtasks
            .iter()
            .filter(|s| !done.contains(&s.id) && s.depends_on.iter().all(|d| done.contains(d)))
            .min_by_key(|s| s.id)
            .ok_or_else(|| invalid("dependency cycle".into()))?;
        done.insert(next.id);
        order.push(next.clone());
    }
    Ok(order)
}

/// The reasoner's decomposition if it proposes a valid one, otherwise the
/// fixed one.
pub fn decompose(reasoner: &mut dyn Reasoner, config: &AgentConfig, digest: &JobDigest, log: &mut Vec<String>) -> Vec<Subtask> {
    if let Some(proposed) = reasoner.propose_decomposition(config, digest) {
        match validate_decomposition(&proposed, config) {
            Ok(order) => return order,
            Err(e) => log.push(format!("{}: {e}; using the fixed decomposition", config.name)),
        }
    }
    fixed_decomposition(config)
}

/// Remaining budget of one stage.
#[derive(Debug, Clone)]
struct StageBudget {
    calls_left: u32,
    tokens_left: u64,
}

impl StageBudget {
    fn new(config: &AgentConfig) -> Self {
        StageBudget {
            calls_left: config.budgets.max_total_tool_calls,
            tokens_left: config.budgets.token_budget,
        }
    }

    fn spend_tokens(&mut self, chars: usize) {
        self.tokens_left = self.tokens_left.saturating_sub((chars as u64).div_ceil(4));
    }
}

fn approx_chars<T: Serialize>(v: &T) -> usize {
    serde_json::to_string(v).map_or(0, |s| s.len())
}

/// Runs the reason/act/observe loop for one subtask until the reasoner
/// finishes or a budget runs out.
#[allow(clippy::too_many_arguments)]
pub fn run_subtask(
    reasoner: &mut dyn Reasoner,
    runner: &mut ToolRunner,
    config: &AgentConfig,
    subtask: &Subtask,
    digest: &JobDigest,
    prior: &[SubtaskFindings],
    calls_left: &mut u32,
    tokens_left: &mut u64,
) -> SubtaskFindings {
    let mut budget = StageBudget {
        calls_left: *calls_left,
        tokens_left: *tokens_left,
    };
    let out = subtask_loop(reasoner, runner, config, subtask, digest, prior, &mut budget);
    *calls_left = budget.calls_left;
    *tokens_left = budget.tokens_left;
    out
}

fn subtask_loop(
    reasoner: &mut dyn Reasoner,
    runner: &mut ToolRunner,
    config: &AgentConfig,
    subtask: &Subtask,
    digest: &JobDigest,
    prior: &[SubtaskFindings],
    budget: &mut StageBudget,
) -> SubtaskFindings {
    let tools = runner.describe(&config.tool_registry);
    let mut observations: Vec<Observation> = Vec::new();
    let mut iterations = 0;
    let mut calls = 0;
    loop {
        let ctx = StepContext {
            config,
            subtask,
            digest,
            observations: &observations,
            prior,
            tools: &tools,
        };
        let exhausted = if iterations >= config.budgets.max_iterations_per_subtask {
            Some("iteration")
        } else if budget.tokens_left == 0 {
            Some("token")
        } else {
            None
        };
        if let Some(kind) = exhausted {
            return best_effort(reasoner, &ctx, kind, calls);
        }
        iterations += 1;
        match reasoner.next_action(&ctx) {
            Action::Call(call) => {
                budget.spend_tokens(approx_chars(&call));
                if budget.calls_left == 0 {
                    return best_effort(reasoner, &ctx, "tool-call", calls);
                }
                budget.calls_left -= 1;
                calls += 1;
                let (result, cached) = runner.execute(&call, &config.tool_registry);
                tracing::debug!(tool = %call.tool, status = ?result.status, cached, "tool call");
                budget.spend_tokens(approx_chars(&result.payload));
                observations.push(Observation { call, result, cached });
            }
            Action::Finish {
                findings,
                structured,
                notes,
            } => {
                budget.spend_tokens(approx_chars(&findings) + approx_chars(&structured));
                return SubtaskFindings {
                    subtask_id: subtask.id,
                    report: findings,
                    structured,
                    notes,
                    tool_calls: calls,
                    budget_exhausted: false,
                };
            }
        }
    }
}

fn best_effort(reasoner: &mut dyn Reasoner, ctx: &StepContext<'_>, kind: &str, calls: u32) -> SubtaskFindings {
    let mut report = reasoner.best_effort(ctx);
    for f in &mut report.findings {
        f.confidence = Confidence::Low;
    }
    let note = format!("{kind} budget exhausted in subtask {}; best-effort findings at low confidence", ctx.subtask.id);
    tracing::warn!("{note}");
    SubtaskFindings {
        subtask_id: ctx.subtask.id,
        report,
        structured: BTreeMap::new(),
        notes: vec![note],
        tool_calls: calls,
        budget_exhausted: true,
    }
}

/// Decomposes, runs every subtask in dependency order, and synthesizes.
pub fn run_stage(
    config: &AgentConfig,
    digest: &JobDigest,
    runner: &mut ToolRunner,
    reasoner: &mut dyn Reasoner,
) -> Result<StageOutput, AgentError> {
    let mut log = Vec::new();
    runner.set_timeout(Duration::from_secs_f64(config.budgets.per_tool_timeout_s));
    let subtasks = decompose(reasoner, config, digest, &mut log);
    let mut budget = StageBudget::new(config);
    let mut findings: Findings = Vec::new();
    for s in &subtasks {
        let f = subtask_loop(reasoner, runner, config, s, digest, &findings, &mut budget);
        log.extend(f.notes.iter().map(|n| format!("{} subtask {}: {n}", config.name, s.id)));
        findings.push(f);
    }
    let document = synthesize(&findings, config)?;
    let tool_calls = findings.iter().map(|f| f.tool_calls).sum();
    Ok(StageOutput {
        stage: config.name.clone(),
        subtasks,
        findings,
        document,
        tool_calls,
        log,
    })
}

/// Turns the stage-one document into a bundle: GPU fields made
/// consistent, ISA closed under implication, floor applied, invariants
/// checked, then user overrides merged.
pub fn finalize_bundle(document: &Value, job: &JobSpec) -> Result<ConstraintBundle, AgentError> {
    let mut b = ConstraintBundle::from_json(document).map_err(|e| AgentError::SchemaViolation(vec![e.to_string()]))?;
    if !b.gpu_required.value {
        b.gpu_count.value = 0;
        b.gpu_mem_gb.value = 0.0;
    } else if b.gpu_count.value == 0 {
        b.gpu_count.value = 1;
        b.gpu_count.rationale.push_str("; at least one device when a GPU is required");
    }
    let closed = close_isa(&b.isa_features.value);
    if closed != b.isa_features.value {
        b.isa_features.value = closed;
        b.isa_features.rationale.push_str("; closed under avx512 => avx2 => avx");
    }
    let b = apply_estimator_floor(b);
    let errors = validate_bundle(&b);
    if !errors.is_empty() {
        return Err(AgentError::SchemaViolation(errors));
    }
    Ok(match &job.user_overrides {
        Some(o) => merge_with_overrides(b, o),
        None => b,
    })
}

/// Runs constraint estimation then instance selection for `job`.
pub fn run_pipeline(
    job: &JobSpec,
    catalog: &Catalog,
    history: Vec<HistoryEvidence>,
    reasoner: &mut dyn Reasoner,
    opts: &PipelineOptions,
) -> Result<PipelineOutput, AgentError> {
    let overrides = job.user_overrides.clone().unwrap_or_default();
    let mut log = Vec::new();
    let catalog = match &overrides.cloud {
        Some(p) => {
            let c = catalog.for_provider(p);
            log.push(format!("catalog restricted to provider {p}: {} offer(s)", c.len()));
            c
        }
        None => catalog.clone(),
    };

    if let Some(name) = &overrides.instance_type {
        let offer = catalog
            .find_by_name(name)
            .into_iter()
            .next()
            .cloned()
            .ok_or_else(|| AgentError::NonexistentInstance {
                provider: overrides.cloud.clone(),
                name: name.clone(),
            })?;
        log.push(format!("instance type {name} given; estimation and ranking skipped"));
        let bundle = merge_with_overrides(ConstraintBundle::no_evidence(), &overrides);
        let pref = InstancePreference {
            rank: 1,
            score: offer.price_per_hour_usd,
            rationale: "user-selected instance type".into(),
            offer,
        };
        return Ok(PipelineOutput {
            bundle,
            preferences: vec![pref],
            bypassed: true,
            constraint_stage: None,
            selection_stage: None,
            log,
            stats: PipelineStats::default(),
            transcript: reasoner.transcript(),
        });
    }

    let history_available = !history.is_empty();
    let ctx = Arc::new(JobContext {
        job: job.clone(),
        history,
        disassembler: opts.disassembler.clone(),
    });
    let catalog = Arc::new(catalog);
    let mut tools = constraint_tools(ctx);
    tools.extend(selection_tools(Arc::clone(&catalog)));
    let mut runner = ToolRunner::new(tools, Duration::from_secs_f64(opts.constraint_config.budgets.per_tool_timeout_s));
    for t in &opts.extra_tools {
        runner.register(Arc::clone(t));
    }

    let digest = JobDigest::from_job(job, history_available);
    let stage1 = run_stage(&opts.constraint_config, &digest, &mut runner, reasoner)?;
    log.extend(stage1.log.iter().cloned());
    let bundle = finalize_bundle(&stage1.document, job)?;

    let digest = JobDigest::for_selection(bundle.clone());
    let stage2 = run_stage(&opts.selection_config, &digest, &mut runner, reasoner)?;
    log.extend(stage2.log.iter().cloned());
    let list: PreferenceList = serde_json::from_value(stage2.document.clone())
        .map_err(|e| AgentError::Selector(SelectorError::Malformed(e.to_string())))?;
    let resolved = list.resolve(&catalog)?;
    let (mut preferences, dropped) = drop_violations(resolved, &catalog, &bundle);
    log.extend(dropped);
    if preferences.is_empty() {
        let feasible = filter_feasible(&catalog, &bundle);
        if feasible.is_empty() {
            return Err(SelectorError::NoFeasibleInstance.into());
        }
        log.push("no valid preference from the reasoner; using the deterministic ranking".into());
        preferences = rank_instances(&feasible, &bundle)?;
    }

    let executions: BTreeMap<String, u32> = runner
        .tool_names()
        .into_iter()
        .map(|n| {
            let c = runner.executions(&n);
            (n, c)
        })
        .filter(|(_, c)| *c > 0)
        .collect();
    let stats = PipelineStats {
        tool_calls: runner.requested(),
        cache_hits: runner.cache_hits(),
        executions,
    };
    Ok(PipelineOutput {
        bundle,
        preferences,
        bypassed: false,
        constraint_stage: Some(stage1),
        selection_stage: Some(stage2),
        log,
        stats,
        transcript: reasoner.transcript(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_decomposition_covers_every_dimension_in_order() {
        let cfg = AgentConfig::constraint_estimation();
        let subs = fixed_decomposition(&cfg);
        assert_eq!(subs.len(), 6);
        assert_eq!(subs[0].target_dimensions, ["platform", "isa_features"]);
        assert_eq!(subs[5].depends_on, [5]);
        assert_eq!(validate_decomposition(&subs, &cfg).unwrap(), subs);

        let sel = fixed_decomposition(&AgentConfig::instance_selection());
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].target_dimensions, ["items"]);
    }

    #[test]
    fn bad_decompositions_are_rejected() {
        let cfg = AgentConfig::constraint_estimation();
        let mut subs = fixed_decomposition(&cfg);
        subs[0].depends_on = vec![6];
        assert!(validate_decomposition(&subs, &cfg).unwrap_err().to_string().contains("cycle"));

        let mut subs = fixed_decomposition(&cfg);
        subs.pop();
        assert!(validate_decomposition(&subs, &cfg).unwrap_err().to_string().contains("disk_gb"));

        let mut subs = fixed_decomposition(&cfg);
        subs[1].target_dimensions.push("colour".into());
        assert!(validate_decomposition(&subs, &cfg).is_err());
    }

    #[test]
    fn dependency_order_is_respected() {
        let cfg = AgentConfig::constraint_estimation();
        let mut subs = fixed_decomposition(&cfg);
        subs.reverse();
        for s in &mut subs {
            s.depends_on.clear();
        }
        subs[0].depends_on = vec![1];
        let order = validate_decomposition(&subs, &cfg).unwrap();
        let pos = |id| order.iter().position(|s| s.id == id).unwrap();
        assert!(pos(1) < pos(6));
    }
}
