//! Simulated cloud execution: run a workload profile on an offer, recover
//! from failures by stepping down the preference list, and render compact
//! measurement summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::InstanceOffer;
use crate::constraints::{IoIntensity, IsaSet, SYSTEM_HEADROOM_GB};
use crate::selector::InstancePreference;

/// Root volume every simulated instance gets unless more was requested.
pub const ROOT_VOLUME_GB: f64 = 100.0;
/// Summaries stay under roughly a thousand tokens at four characters each.
pub const SUMMARY_MAX_CHARS: usize = 4000;
/// Illegal-instruction faults surface at start-up.
pub const ILLEGAL_INSTRUCTION_RUNTIME_S: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("all {} candidates exhausted", .0.attempts.len())]
    AllCandidatesExhausted(Box<RecoveryReport>),
    #[error("cannot load profile {path}: {message}")]
    Profile { path: String, message: String },
}

/// Ground truth standing in for a real cloud run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub true_mem_hwm_gb: f64,
    pub true_cpu_parallelism: u32,
    pub needs_gpu: bool,
    pub true_gpu_mem_gb: f64,
    pub required_isa: IsaSet,
    pub io_class: IoIntensity,
    pub disk_gb: f64,
    pub base_runtime_s_at_reference: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imported_modules: Option<BTreeSet<String>>,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.true_mem_hwm_gb > 0.0 && self.true_mem_hwm_gb.is_finite()) {
            return Err("true_mem_hwm_gb must be positive".into());
        }
        if self.true_cpu_parallelism == 0 {
            return Err("true_cpu_parallelism must be positive".into());
        }
        if !(self.disk_gb > 0.0) || !(self.base_runtime_s_at_reference > 0.0) {
            return Err("disk_gb and base runtime must be positive".into());
        }
        if !self.needs_gpu && self.true_gpu_mem_gb != 0.0 {
            return Err("true_gpu_mem_gb must be 0 without a GPU".into());
        }
        if self.true_gpu_mem_gb < 0.0 {
            return Err("true_gpu_mem_gb must be non-negative".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExecutorError> {
        let err = |message: String| ExecutorError::Profile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let profile: WorkloadProfile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        profile.validate().map_err(err)?;
        Ok(profile)
    }

    /// Runtime on `vcpus` cores: no speedup past the parallelism ceiling.
    pub fn runtime_on(&self, vcpus: u32) -> f64 {
        let p = self.true_cpu_parallelism;
        self.base_runtime_s_at_reference * f64::from(p) / f64::from(vcpus.min(p).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    FailOom,
    FailIllegalInstruction,
    FailMissingGpu,
    FailInsufficientDisk,
    FailProvisionUnavailable,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Success => "success",
            RunStatus::FailOom => "fail_oom",
            RunStatus::FailIllegalInstruction => "fail_illegal_instruction",
            RunStatus::FailMissingGpu => "fail_missing_gpu",
            RunStatus::FailInsufficientDisk => "fail_insufficient_disk",
            RunStatus::FailProvisionUnavailable => "fail_provision_unavailable",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::FailOom => 137,
            RunStatus::FailIllegalInstruction => 132,
            RunStatus::FailMissingGpu | RunStatus::FailInsufficientDisk => 1,
            RunStatus::FailProvisionUnavailable => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pressure {
    pub some_pct: f64,
    pub full_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpuUtil {
    pub user_pct: f64,
    pub system_pct: f64,
    pub idle_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sched {
    pub running_avg: f64,
    pub waiting_avg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuUsage {
    pub util_pct: f64,
    pub mem_used_gb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoBytes {
    pub read_bytes: u64,
    pub write_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiskUsage {
    pub used_gb: f64,
    pub avail_gb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mem_total_gb: f64,
    pub mem_peak_used_gb: f64,
    pub mem_pressure: Pressure,
    pub cpu_util: CpuUtil,
    pub sched: Sched,
    pub cpu_pressure: Pressure,
    pub gpu: Option<GpuUsage>,
    pub io: IoBytes,
    pub io_pressure: Pressure,
    pub disk: DiskUsage,
    pub imported_modules: Option<BTreeSet<String>>,
}

impl MetricsSummary {
    /// Empty metrics for a run that never started.
    pub fn empty() -> Self {
        let zero = Pressure { some_pct: 0.0, full_pct: 0.0 };
        MetricsSummary {
            mem_total_gb: 0.0,
            mem_peak_used_gb: 0.0,
            mem_pressure: zero,
            cpu_util: CpuUtil {
                user_pct: 0.0,
                system_pct: 0.0,
                idle_pct: 100.0,
            },
            sched: Sched {
                running_avg: 0.0,
                waiting_avg: 0.0,
            },
            cpu_pressure: zero,
            gpu: None,
            io: IoBytes {
                read_bytes: 0,
                write_bytes: 0,
            },
            io_pressure: zero,
            disk: DiskUsage {
                used_gb: 0.0,
                avail_gb: 0.0,
            },
            imported_modules: None,
        }
    }

    /// Consistency problems, empty when the summary is well formed.
    pub fn check(&self, success: bool) -> Vec<String> {
        let mut out = Vec::new();
        let pcts = [
            ("mem_pressure.some", self.mem_pressure.some_pct),
            ("mem_pressure.full", self.mem_pressure.full_pct),
            ("cpu.user", self.cpu_util.user_pct),
            ("cpu.system", self.cpu_util.system_pct),
            ("cpu.idle", self.cpu_util.idle_pct),
            ("cpu_pressure.some", self.cpu_pressure.some_pct),
            ("cpu_pressure.full", self.cpu_pressure.full_pct),
            ("io_pressure.some", self.io_pressure.some_pct),
            ("io_pressure.full", self.io_pressure.full_pct),
        ];
        for (name, v) in pcts {
            if !(0.0..=100.0).contains(&v) {
                out.push(format!("{name}={v} outside [0,100]"));
            }
        }
        if let Some(g) = self.gpu {
            if !(0.0..=100.0).contains(&g.util_pct) {
                out.push(format!("gpu.util={} outside [0,100]", g.util_pct));
            }
        }
        let sum = self.cpu_util.user_pct + self.cpu_util.system_pct + self.cpu_util.idle_pct;
        if (sum - 100.0).abs() > 0.5 {
            out.push(format!("cpu percentages sum to {sum}"));
        }
        if success && self.mem_peak_used_gb > self.mem_total_gb {
            out.push("peak memory exceeds total".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub exit_code: i32,
    pub runtime_s: f64,
    pub metrics: MetricsSummary,
}

impl RunOutcome {
    pub fn is_success(&self) -> bool {
        self.status == RunStatus::Success
    }

    pub fn unavailable() -> Self {
        RunOutcome {
            status: RunStatus::FailProvisionUnavailable,
            exit_code: RunStatus::FailProvisionUnavailable.exit_code(),
            runtime_s: 0.0,
            metrics: MetricsSummary::empty(),
        }
    }
}

fn has_adequate_gpu(offer: &InstanceOffer, profile: &WorkloadProfile) -> bool {
    offer
        .accelerator
        .as_ref()
        .is_some_and(|a| a.count >= 1 && a.mem_gb_per_device >= profile.true_gpu_mem_gb)
}

pub fn simulate_run(offer: &InstanceOffer, profile: &WorkloadProfile) -> RunOutcome {
    simulate_run_with_root(offer, profile, ROOT_VOLUME_GB)
}

/// As [`simulate_run`] with a root volume of `root_gb`.
pub fn simulate_run_with_root(offer: &InstanceOffer, profile: &WorkloadProfile, root_gb: f64) -> RunOutcome {
    let full = profile.runtime_on(offer.vcpus);
    let needed = profile.true_mem_hwm_gb + SYSTEM_HEADROOM_GB;
    let (status, runtime_s) = if !profile.required_isa.is_subset(&offer.isa_features) {
        (RunStatus::FailIllegalInstruction, ILLEGAL_INSTRUCTION_RUNTIME_S.min(full))
    } else if profile.needs_gpu && !has_adequate_gpu(offer, profile) {
        (RunStatus::FailMissingGpu, 1.0f64.min(full))
    } else if needed > offer.memory_gb {
        // The heap is built before the main loop starts.
        (RunStatus::FailOom, 0.1 * full)
    } else if profile.disk_gb > root_gb {
        (RunStatus::FailInsufficientDisk, 0.5 * full)
    } else {
        (RunStatus::Success, full)
    };
    RunOutcome {
        status,
        exit_code: status.exit_code(),
        runtime_s,
        metrics: synthesize_metrics(offer, profile, status, runtime_s, root_gb),
    }
}

fn synthesize_metrics(
    offer: &InstanceOffer,
    profile: &WorkloadProfile,
    status: RunStatus,
    runtime_s: f64,
    root_gb: f64,
) -> MetricsSummary {
    let v = offer.vcpus;
    let p = profile.true_cpu_parallelism;
    let running = v.min(p);
    let busy = 100.0 * f64::from(running) / f64::from(v);
    let waiting = f64::from(p.saturating_sub(v));
    let total = offer.memory_gb;
    let needed = profile.true_mem_hwm_gb + SYSTEM_HEADROOM_GB;
    let (peak, mem_pressure) = if status == RunStatus::FailOom {
        (
            total,
            Pressure {
                some_pct: 100.0,
                full_pct: 100.0,
            },
        )
    } else {
        let ratio = needed / total;
        let some = if ratio > 0.9 { ((ratio - 0.9) * 1000.0).min(100.0) } else { 0.0 };
        (needed.min(total), Pressure { some_pct: some, full_pct: 0.0 })
    };
    let cpu_pressure = Pressure {
        some_pct: if p > v { 100.0 * waiting / f64::from(p) } else { 0.0 },
        full_pct: 0.0,
    };
    let gpu = offer.accelerator.as_ref().map(|a| {
        if profile.needs_gpu && status == RunStatus::Success {
            GpuUsage {
                util_pct: 90.0,
                mem_used_gb: profile.true_gpu_mem_gb.min(a.mem_gb_per_device),
            }
        } else {
            GpuUsage {
                util_pct: 0.0,
                mem_used_gb: 0.0,
            }
        }
    });
    // Bytes moved per second of runtime for each I/O class.
    let (read_rate, write_rate, io_some, io_full) = match profile.io_class {
        IoIntensity::Minimal => (1.0e6, 1.0e5, 0.0, 0.0),
        IoIntensity::Moderate => (5.0e7, 1.0e7, 5.0, 0.0),
        IoIntensity::Heavy => (5.0e8, 2.0e8, 40.0, 10.0),
    };
    let used = profile.disk_gb.min(root_gb);
    MetricsSummary {
        mem_total_gb: total,
        mem_peak_used_gb: peak,
        mem_pressure,
        cpu_util: CpuUtil {
            user_pct: busy * 0.95,
            system_pct: busy * 0.05,
            idle_pct: 100.0 - busy,
        },
        sched: Sched {
            running_avg: f64::from(running),
            waiting_avg: waiting,
        },
        cpu_pressure,
        gpu,
        io: IoBytes {
            read_bytes: (read_rate * runtime_s) as u64,
            write_bytes: (write_rate * runtime_s) as u64,
        },
        io_pressure: Pressure {
            some_pct: io_some,
            full_pct: io_full,
        },
        disk: DiskUsage {
            used_gb: used,
            avail_gb: root_gb - used,
        },
        imported_modules: profile.imported_modules.clone(),
    }
}

/// Candidates known to be unavailable, keyed by `provider/name`. Anything
/// absent is available.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Availability(pub BTreeMap<String, bool>);

impl Availability {
    pub fn all_available() -> Self {
        Availability::default()
    }

    pub fn set(&mut self, offer: &InstanceOffer, available: bool) {
        self.0.insert(availability_key(offer), available);
    }

    pub fn is_available(&self, offer: &InstanceOffer) -> bool {
        self.0.get(&availability_key(offer)).copied().unwrap_or(true)
    }
}

fn availability_key(offer: &InstanceOffer) -> String {
    format!("{}/{}", offer.provider, offer.name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub rank: usize,
    pub offer: InstanceOffer,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub rank: usize,
    pub provider: String,
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub attempts: Vec<Attempt>,
    pub skips: Vec<Skip>,
}

impl RecoveryReport {
    pub fn final_attempt(&self) -> Option<&Attempt> {
        self.attempts.last()
    }

    /// Attempts and skips in rank order, one line each.
    pub fn log_lines(&self) -> Vec<String> {
        let mut lines: Vec<(usize, String)> = self
            .attempts
            .iter()
            .map(|a| {
                (
                    a.rank,
                    format!(
                        "rank {} {}: {} exit={} runtime_s={:.3}",
                        a.rank,
                        a.offer.name,
                        a.outcome.status.as_str(),
                        a.outcome.exit_code,
                        a.outcome.runtime_s
                    ),
                )
            })
            .chain(self.skips.iter().map(|s| (s.rank, format!("rank {} {}: skipped, {}", s.rank, s.name, s.reason))))
            .collect();
        lines.sort_by_key(|(r, _)| *r);
        lines.into_iter().map(|(_, l)| l).collect()
    }
}

/// What the next attempt must provide, learned from earlier failures.
#[derive(Debug, Clone, Default)]
struct Requirements {
    min_memory_gb: f64,
    isa: IsaSet,
    accelerator: bool,
}

impl Requirements {
    fn unmet(&self, offer: &InstanceOffer) -> Option<String> {
        if offer.memory_gb < self.min_memory_gb {
            return Some(format!(
                "{} GB is below the {} GB required after an out-of-memory failure",
                offer.memory_gb, self.min_memory_gb
            ));
        }
        if !self.isa.is_subset(&offer.isa_features) {
            let missing: Vec<&str> = self.isa.difference(&offer.isa_features).map(|f| f.as_str()).collect();
            return Some(format!("lacks {} after an illegal-instruction fault", missing.join(",")));
        }
        if self.accelerator && offer.accelerator.is_none() {
            return Some("no accelerator after a missing-GPU failure".to_string());
        }
        None
    }

    fn learn(&mut self, offer: &InstanceOffer, status: RunStatus, profile: &WorkloadProfile) {
        match status {
            RunStatus::FailOom => self.min_memory_gb = self.min_memory_gb.max(2.0 * offer.memory_gb),
            RunStatus::FailIllegalInstruction => {
                // The fault names the offending instruction, which identifies
                // the extension the offer lacks.
                let missing: IsaSet = profile.required_isa.difference(&offer.isa_features).copied().collect();
                self.isa.extend(crate::constraints::close_isa(&missing));
            }
            RunStatus::FailMissingGpu => self.accelerator = true,
            _ => {}
        }
    }
}

/// Tries preferences in rank order until one succeeds.
pub fn execute_with_recovery(
    prefs: &[InstancePreference],
    profile: &WorkloadProfile,
    availability: &Availability,
) -> Result<RecoveryReport, ExecutorError> {
    execute_with_recovery_root(prefs, profile, availability, ROOT_VOLUME_GB)
}

pub fn execute_with_recovery_root(
    prefs: &[InstancePreference],
    profile: &WorkloadProfile,
    availability: &Availability,
    root_gb: f64,
) -> Result<RecoveryReport, ExecutorError> {
    let mut report = RecoveryReport {
        attempts: Vec::new(),
        skips: Vec::new(),
    };
    let mut req = Requirements::default();
    for pref in prefs {
        let offer = &pref.offer;
        if let Some(reason) = req.unmet(offer) {
            tracing::info!(rank = pref.rank, name = %offer.name, "skipping: {reason}");
            report.skips.push(Skip {
                rank: pref.rank,
                provider: offer.provider.clone(),
                name: offer.name.clone(),
                reason,
            });
            continue;
        }
        if !availability.is_available(offer) {
            report.attempts.push(Attempt {
                rank: pref.rank,
                offer: offer.clone(),
                outcome: RunOutcome::unavailable(),
            });
            continue;
        }
        let outcome = simulate_run_with_root(offer, profile, root_gb);
        let status = outcome.status;
        report.attempts.push(Attempt {
            rank: pref.rank,
            offer: offer.clone(),
            outcome,
        });
        if status == RunStatus::Success {
            return Ok(report);
        }
        req.learn(offer, status, profile);
    }
    Err(ExecutorError::AllCandidatesExhausted(Box::new(report)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fit {
    Tight,
    RightSized,
    Overprovisioned,
}

impl Fit {
    pub fn as_str(self) -> &'static str {
        match self {
            Fit::Tight => "tight",
            Fit::RightSized => "right-sized",
            Fit::Overprovisioned => "overprovisioned",
        }
    }
}

/// Peak over total in thirds.
pub fn memory_fit(m: &MetricsSummary) -> Fit {
    if m.mem_total_gb <= 0.0 {
        return Fit::Tight;
    }
    let r = m.mem_peak_used_gb / m.mem_total_gb;
    if r > 2.0 / 3.0 {
        Fit::Tight
    } else if r > 1.0 / 3.0 {
        Fit::RightSized
    } else {
        Fit::Overprovisioned
    }
}

/// Threads waiting for a core is tight; a third or more of the cores idle
/// is overprovisioned.
pub fn cpu_fit(m: &MetricsSummary) -> Fit {
    if m.sched.waiting_avg > 0.0 {
        Fit::Tight
    } else if m.cpu_util.idle_pct >= 100.0 / 3.0 {
        Fit::Overprovisioned
    } else {
        Fit::RightSized
    }
}

/// Fixed-field plain-text rendering, at most [`SUMMARY_MAX_CHARS`].
pub fn summarize_metrics(outcome: &RunOutcome) -> String {
    let m = &outcome.metrics;
    let mut s = String::new();
    let _ = writeln!(s, "status={} exit_code={} runtime_s={:.3}", outcome.status.as_str(), outcome.exit_code, outcome.runtime_s);
    let _ = writeln!(s, "mem_total_gb={:.2} mem_peak_used_gb={:.2}", m.mem_total_gb, m.mem_peak_used_gb);
    let _ = writeln!(s, "mem_pressure some={:.1}% full={:.1}%", m.mem_pressure.some_pct, m.mem_pressure.full_pct);
    let _ = writeln!(
        s,
        "cpu user={:.1}% system={:.1}% idle={:.1}%",
        m.cpu_util.user_pct, m.cpu_util.system_pct, m.cpu_util.idle_pct
    );
    let _ = writeln!(s, "sched running_avg={:.2} waiting_avg={:.2}", m.sched.running_avg, m.sched.waiting_avg);
    let _ = writeln!(s, "cpu_pressure some={:.1}% full={:.1}%", m.cpu_pressure.some_pct, m.cpu_pressure.full_pct);
    match m.gpu {
        Some(g) => {
            let _ = writeln!(s, "gpu util={:.1}% mem_used_gb={:.2}", g.util_pct, g.mem_used_gb);
        }
        None => s.push_str("gpu none\n"),
    }
    let _ = writeln!(s, "io read_bytes={} write_bytes={}", m.io.read_bytes, m.io.write_bytes);
    let _ = writeln!(s, "io_pressure some={:.1}% full={:.1}%", m.io_pressure.some_pct, m.io_pressure.full_pct);
    let _ = writeln!(s, "disk used_gb={:.2} avail_gb={:.2}", m.disk.used_gb, m.disk.avail_gb);
    let mut flags = Vec::new();
    if m.mem_pressure.full_pct >= 100.0 {
        flags.push("memory_pressure_full");
    }
    if m.cpu_pressure.some_pct > 0.0 {
        flags.push("cpu_contention");
    }
    if outcome.status != RunStatus::FailProvisionUnavailable {
        let _ = writeln!(
            s,
            "memory_fit={} cpu_fit={} (fit thresholds are a fixed convention: thirds of capacity)",
            memory_fit(m).as_str(),
            cpu_fit(m).as_str()
        );
    }
    if !flags.is_empty() {
        let _ = writeln!(s, "flags={}", flags.join(","));
    }
    if let Some(mods) = &m.imported_modules {
        let list: Vec<&str> = mods.iter().map(String::as_str).collect();
        let _ = writeln!(s, "imported_modules={}", list.join(","));
    }
    truncate_chars(s, SUMMARY_MAX_CHARS)
}

/// Cuts `s` to at most `max` characters, marking the cut.
pub fn truncate_chars(s: String, max: usize) -> String {
    if s.chars().count() <= max {
        return s;
    }
    let marker = "...[truncated]";
    let keep = max.saturating_sub(marker.len());
    let mut out: String = s.chars().take(keep).collect();
    out.push_str(marker);
    out
}

/// Pulls `mem_peak_used_gb` back out of a rendered summary.
pub fn parse_peak_memory(summary: &str) -> Option<f64> {
    summary
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("mem_peak_used_gb="))
        .and_then(|v| v.parse().ok())
}
