//! Human-readable rendering of pipeline output, attempts and records.

use std::fmt::Write;

use incisor_core::agent::PipelineOutput;
use incisor_core::catalog::InstanceOffer;
use incisor_core::constraints::ConstraintBundle;
use incisor_core::executor::RecoveryReport;
use incisor_core::records::JobRecord;
use incisor_core::submission::JobSpec;
use serde::Serialize;

/// How many preferences the run report lists.
const SHOWN_PREFERENCES: usize = 3;

#[derive(Debug, Serialize)]
pub struct AttemptCost {
    pub rank: usize,
    pub offer: String,
    pub runtime_s: f64,
    pub price_per_hour_usd: f64,
    pub cost_usd: f64,
}

#[derive(Debug, Serialize)]
pub struct Costs {
    pub attempts: Vec<AttemptCost>,
    pub total_usd: f64,
}

/// Billed cost of every attempt: runtime in hours times the hourly price.
pub fn costs(report: &RecoveryReport) -> Costs {
    let attempts: Vec<AttemptCost> = report
        .attempts
        .iter()
        .map(|a| AttemptCost {
            rank: a.rank,
            offer: format!("{}/{}", a.offer.provider, a.offer.name),
            runtime_s: a.outcome.runtime_s,
            price_per_hour_usd: a.offer.price_per_hour_usd,
            cost_usd: a.outcome.runtime_s / 3600.0 * a.offer.price_per_hour_usd,
        })
        .collect();
    let total_usd = attempts.iter().map(|a| a.cost_usd).sum();
    Costs { attempts, total_usd }
}

pub fn offer_line(o: &InstanceOffer) -> String {
    let accel = o
        .accelerator
        .as_ref()
        .map(|a| format!(" {}x{}", a.count, a.kind))
        .unwrap_or_default();
    format!(
        "{:<6} {:<22} {:<7} {:>4} vCPU {:>8.1} GB{accel}  ${:.4}/h",
        o.provider,
        o.name,
        o.architecture.as_str(),
        o.vcpus,
        o.memory_gb,
        o.price_per_hour_usd
    )
}

fn bundle_block(out: &mut String, bundle: &ConstraintBundle) {
    writeln!(out, "constraints: {}", bundle.summary()).unwrap();
    for (dim, conf, rationale) in bundle.rationales() {
        writeln!(out, "  {dim:<15} [{conf}] {rationale}").unwrap();
    }
}

pub fn pipeline(job: &JobSpec, p: &PipelineOutput) -> String {
    let mut out = String::new();
    writeln!(out, "job {} ({})", job.job_id, job.workload_kind).unwrap();
    if p.bypassed {
        writeln!(out, "instance type given, recommendation bypassed").unwrap();
    } else {
        bundle_block(&mut out, &p.bundle);
    }
    writeln!(out, "preferences ({} total):", p.preferences.len()).unwrap();
    for pref in p.preferences.iter().take(SHOWN_PREFERENCES) {
        writeln!(out, "  {}. {}", pref.rank, offer_line(&pref.offer)).unwrap();
        writeln!(out, "     {}", pref.rationale).unwrap();
    }
    writeln!(
        out,
        "tool calls: {} ({} served from cache)",
        p.stats.tool_calls, p.stats.cache_hits
    )
    .unwrap();
    out
}

pub fn execution(report: &RecoveryReport, record: &JobRecord) -> String {
    let mut out = String::new();
    writeln!(out, "attempts:").unwrap();
    for line in report.log_lines() {
        writeln!(out, "  {line}").unwrap();
    }
    let c = costs(report);
    for a in &c.attempts {
        writeln!(
            out,
            "  cost rank {} {}: {:.1} s x ${:.4}/h = ${:.6}",
            a.rank, a.offer, a.runtime_s, a.price_per_hour_usd, a.cost_usd
        )
        .unwrap();
    }
    writeln!(out, "total cost: ${:.6}", c.total_usd).unwrap();
    writeln!(out, "final status: {}", record.final_status.as_str()).unwrap();
    if let Some(reason) = record.failure_reason() {
        writeln!(out, "failure: {reason}").unwrap();
    }
    if !record.metrics_summary.is_empty() {
        writeln!(out, "metrics: {}", record.metrics_summary).unwrap();
    }
    out
}

pub fn explain(r: &JobRecord) -> String {
    let mut out = String::new();
    writeln!(out, "job {}  created {}", r.job_id, r.created_at.to_rfc3339()).unwrap();
    writeln!(out, "command: {}", r.spec_snapshot.invocation.render()).unwrap();
    bundle_block(&mut out, &r.bundle);
    writeln!(out, "preferences:").unwrap();
    for p in &r.preferences {
        writeln!(out, "  {}. {}", p.rank, offer_line(&p.offer)).unwrap();
        writeln!(out, "     {}", p.rationale).unwrap();
    }
    writeln!(out, "attempts:").unwrap();
    for a in &r.attempts {
        writeln!(
            out,
            "  rank {} {}/{} ({} GB): {} exit={} runtime_s={:.3}",
            a.rank,
            a.provider,
            a.offer_name,
            a.memory_gb,
            a.status.as_str(),
            a.exit_code,
            a.runtime_s
        )
        .unwrap();
    }
    for s in &r.skips {
        writeln!(out, "  rank {} {}/{}: skipped, {}", s.rank, s.provider, s.name, s.reason).unwrap();
    }
    writeln!(out, "final status: {}", r.final_status.as_str()).unwrap();
    if let Some(reason) = r.failure_reason() {
        writeln!(out, "failure: {reason}").unwrap();
    }
    if !r.metrics_summary.is_empty() {
        writeln!(out, "metrics: {}", r.metrics_summary).unwrap();
    }
    for n in &r.notes {
        writeln!(out, "note: {n}").unwrap();
    }
    writeln!(out, "logs: {}", r.logs_path.display()).unwrap();
    out
}
