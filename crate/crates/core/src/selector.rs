//! Instance selection: score feasible offers against a constraint bundle,
//! keep the ten best, and re-check externally supplied preference lists.

use std::cmp::{Ordering, Reverse};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{hard_violations, Catalog, HardViolation, InstanceOffer};
use crate::constraints::{effective_instance_memory_gb, Confidence, ConstraintBundle, IoIntensity};

pub const MAX_PREFERENCES: usize = 10;
pub const PREFERENCES_SCHEMA: &str = "instance-preferences/1";

#[derive(Debug, Error, PartialEq)]
pub enum SelectorError {
    #[error("no feasible instance satisfies the constraint bundle")]
    NoFeasibleInstance,
    #[error("malformed preference list: {0}")]
    Malformed(String),
}

/// Multiplicative score penalties. Every factor is at least 1 so a penalty
/// never makes an offer look cheaper than its price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub undersized_cpu: f64,
    pub oversized_cpu: f64,
    pub oversized_cpu_ratio: f64,
    pub oversized_memory: f64,
    pub oversized_memory_ratio: f64,
    pub unneeded_accelerator: f64,
    pub unneeded_premium_storage: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            undersized_cpu: 1.5,
            oversized_cpu: 1.1,
            oversized_cpu_ratio: 4.0,
            oversized_memory: 1.2,
            oversized_memory_ratio: 4.0,
            unneeded_accelerator: 1.5,
            unneeded_premium_storage: 1.1,
        }
    }
}

impl PenaltyConfig {
    /// Largest penalty product any single offer can receive.
    pub fn max_product(&self) -> f64 {
        self.undersized_cpu.max(self.oversized_cpu)
            * self.oversized_memory
            * self.unneeded_accelerator
            * self.unneeded_premium_storage
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePreference {
    pub rank: usize,
    pub offer: InstanceOffer,
    pub rationale: String,
    pub score: f64,
}

/// Applied penalties with their labels.
pub fn penalties(offer: &InstanceOffer, bundle: &ConstraintBundle, cfg: &PenaltyConfig) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let cpus = bundle.cpu_count.value;
    if offer.vcpus < cpus {
        out.push(("fewer vCPUs than threads", cfg.undersized_cpu));
    } else if f64::from(offer.vcpus) > cfg.oversized_cpu_ratio * f64::from(cpus) {
        out.push(("idle vCPUs", cfg.oversized_cpu));
    }
    if offer.memory_gb > cfg.oversized_memory_ratio * effective_instance_memory_gb(bundle) {
        out.push(("memory overprovisioned", cfg.oversized_memory));
    }
    if offer.accelerator.is_some() && !bundle.gpu_required.value {
        out.push(("unneeded accelerator", cfg.unneeded_accelerator));
    }
    if offer.premium_storage && bundle.io_intensity.value == IoIntensity::Minimal {
        out.push(("unneeded premium storage", cfg.unneeded_premium_storage));
    }
    out
}

pub fn score(offer: &InstanceOffer, bundle: &ConstraintBundle, cfg: &PenaltyConfig) -> f64 {
    penalties(offer, bundle, cfg).iter().fold(offer.price_per_hour_usd, |s, (_, f)| s * f)
}

/// Memory size preferred under low memory confidence: the smallest size
/// strictly above the smallest feasible one.
pub fn headroom_tier(feasible: &[InstanceOffer]) -> Option<f64> {
    let min = feasible.iter().map(|o| o.memory_gb).min_by(f64::total_cmp)?;
    feasible.iter().map(|o| o.memory_gb).filter(|&m| m > min).min_by(f64::total_cmp)
}

fn rationale(offer: &InstanceOffer, bundle: &ConstraintBundle, applied: &[(&str, f64)], headroom: Option<f64>) -> String {
    let mut parts = vec![format!(
        "{} GB memory for a {} GB requirement, {} vCPUs for {} threads, ${}/h",
        offer.memory_gb,
        effective_instance_memory_gb(bundle),
        offer.vcpus,
        bundle.cpu_count.value,
        offer.price_per_hour_usd
    )];
    if let Some(p) = offer.physical_cpus {
        parts.push(format!("{p} physical cores"));
    }
    if applied.is_empty() {
        parts.push("no penalties".to_string());
    } else {
        let list: Vec<String> = applied.iter().map(|(l, f)| format!("{l} x{f}")).collect();
        parts.push(format!("penalties: {}", list.join(", ")));
    }
    parts.push(format!("{} generation {}", offer.cpu_vendor.as_str(), offer.cpu_generation));
    if let Some(tier) = headroom {
        if offer.memory_gb >= tier {
            parts.push(format!("headroom tier ({tier} GB) preferred under low memory confidence"));
        } else {
            parts.push("exact fit demoted under low memory confidence".to_string());
        }
    }
    parts.join("; ")
}

pub fn rank_instances(feasible: &[InstanceOffer], bundle: &ConstraintBundle) -> Result<Vec<InstancePreference>, SelectorError> {
    rank_instances_with(feasible, bundle, &PenaltyConfig::default(), MAX_PREFERENCES)
}

pub fn rank_instances_with(
    feasible: &[InstanceOffer],
    bundle: &ConstraintBundle,
    cfg: &PenaltyConfig,
    limit: usize,
) -> Result<Vec<InstancePreference>, SelectorError> {
    if feasible.is_empty() {
        return Err(SelectorError::NoFeasibleInstance);
    }
    let headroom = match bundle.mem_hwm_gb.confidence {
        Confidence::Low => headroom_tier(feasible),
        _ => None,
    };
    let mut scored: Vec<(bool, f64, &InstanceOffer)> = feasible
        .iter()
        .map(|o| {
            let demoted = headroom.is_some_and(|t| o.memory_gb < t);
            (demoted, score(o, bundle, cfg), o)
        })
        .collect();
    scored.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then_with(|| tie_break(a.2, b.2))
    });
    scored.dedup_by(|a, b| a.2.key() == b.2.key());
    Ok(scored
        .into_iter()
        .take(limit)
        .enumerate()
        .map(|(i, (_, s, o))| InstancePreference {
            rank: i + 1,
            offer: o.clone(),
            rationale: rationale(o, bundle, &penalties(o, bundle, cfg), headroom),
            score: s,
        })
        .collect())
}

/// Newer generation, then vendor preference, then name.
pub fn tie_break(a: &InstanceOffer, b: &InstanceOffer) -> Ordering {
    Reverse(a.cpu_generation)
        .cmp(&Reverse(b.cpu_generation))
        .then(a.cpu_vendor.cmp(&b.cpu_vendor))
        .then_with(|| a.name.cmp(&b.name))
        .then_with(|| a.provider.cmp(&b.provider))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceViolation {
    Nonexistent,
    Memory,
    Architecture,
    Isa,
    Accelerator,
    Storage,
}

impl From<HardViolation> for PreferenceViolation {
    fn from(v: HardViolation) -> Self {
        match v {
            HardViolation::Memory => PreferenceViolation::Memory,
            HardViolation::Architecture => PreferenceViolation::Architecture,
            HardViolation::Isa => PreferenceViolation::Isa,
            HardViolation::Accelerator => PreferenceViolation::Accelerator,
            HardViolation::Storage => PreferenceViolation::Storage,
        }
    }
}

/// Re-checks each preference against the catalog. Offers that exist are
/// judged on the catalog's record, not on the capabilities the preference
/// claims.
pub fn validate_preferences(
    prefs: &[InstancePreference],
    catalog: &Catalog,
    bundle: &ConstraintBundle,
) -> Vec<(usize, PreferenceViolation)> {
    let mut out = Vec::new();
    for p in prefs {
        match catalog.get(&p.offer.provider, &p.offer.name) {
            None => out.push((p.rank, PreferenceViolation::Nonexistent)),
            Some(actual) => out.extend(hard_violations(actual, bundle).into_iter().map(|v| (p.rank, v.into()))),
        }
    }
    out
}

/// Drops violating preferences and renumbers the rest. Returns the kept
/// list and one log line per dropped entry.
pub fn drop_violations(
    prefs: Vec<InstancePreference>,
    catalog: &Catalog,
    bundle: &ConstraintBundle,
) -> (Vec<InstancePreference>, Vec<String>) {
    let findings = validate_preferences(&prefs, catalog, bundle);
    let mut kept = Vec::new();
    let mut log = Vec::new();
    for p in prefs {
        let bad: Vec<&PreferenceViolation> = findings.iter().filter(|(r, _)| *r == p.rank).map(|(_, v)| v).collect();
        if bad.is_empty() {
            kept.push(p);
        } else {
            let reasons: Vec<String> = bad.iter().map(|v| format!("{v:?}").to_lowercase()).collect();
            let msg = format!("dropped rank {} {}/{}: {}", p.rank, p.offer.provider, p.offer.name, reasons.join(", "));
            tracing::warn!("{msg}");
            log.push(msg);
        }
    }
    for (i, p) in kept.iter_mut().enumerate() {
        p.rank = i + 1;
    }
    (kept, log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceItem {
    pub rank: usize,
    pub provider: String,
    pub name: String,
    pub rationale: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceList {
    pub schema: String,
    pub items: Vec<PreferenceItem>,
}

impl PreferenceList {
    pub fn from_preferences(prefs: &[InstancePreference]) -> Self {
        PreferenceList {
            schema: PREFERENCES_SCHEMA.to_string(),
            items: prefs
                .iter()
                .map(|p| PreferenceItem {
                    rank: p.rank,
                    provider: p.offer.provider.clone(),
                    name: p.offer.name.clone(),
                    rationale: p.rationale.clone(),
                    score: p.score,
                })
                .collect(),
        }
    }

    /// Resolves items against the catalog. Unknown names keep a placeholder
    /// offer so that validation can report them as nonexistent.
    pub fn resolve(&self, catalog: &Catalog) -> Result<Vec<InstancePreference>, SelectorError> {
        if self.schema != PREFERENCES_SCHEMA {
            return Err(SelectorError::Malformed(format!("schema `{}`", self.schema)));
        }
        if self.items.len() > MAX_PREFERENCES {
            return Err(SelectorError::Malformed(format!("{} items exceed the limit", self.items.len())));
        }
        Ok(self
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let offer = catalog.get(&item.provider, &item.name).cloned().unwrap_or_else(|| InstanceOffer {
                    provider: item.provider.clone(),
                    name: item.name.clone(),
                    architecture: crate::catalog::Architecture::X86_64,
                    vcpus: 1,
                    physical_cpus: None,
                    memory_gb: 0.0,
                    accelerator: None,
                    premium_storage: false,
                    price_per_hour_usd: 0.0,
                    cpu_vendor: crate::catalog::CpuVendor::Other,
                    cpu_generation: 0,
                    isa_features: Default::default(),
                });
                InstancePreference {
                    rank: i + 1,
                    offer,
                    rationale: item.rationale.clone(),
                    score: item.score,
                }
            })
            .collect())
    }
}
