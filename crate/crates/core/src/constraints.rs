//! The hardware constraint bundle: schema, validation and conservative floors.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::submission::UserOverrides;

/// Floor applied to every memory high water mark estimate.
pub const MEMORY_FLOOR_GB: f64 = 1.0;
/// Headroom added for the OS and monitoring when mapping to instance memory.
pub const SYSTEM_HEADROOM_GB: f64 = 2.0;
/// Memory estimate used when no allocation evidence exists.
pub const NO_EVIDENCE_MEMORY_GB: f64 = 4.0;
/// Disk estimate used when no disk evidence exists.
pub const NO_EVIDENCE_DISK_GB: f64 = 8.0;

pub const BUNDLE_SCHEMA: &str = "constraint-bundle/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Low,
    Medium,
    High,
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Confidence::Low => "low",
            Confidence::Medium => "medium",
            Confidence::High => "high",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintEstimate<V> {
    pub value: V,
    pub confidence: Confidence,
    pub rationale: String,
    #[serde(default)]
    pub evidence_refs: Vec<String>,
}

impl<V> ConstraintEstimate<V> {
    pub fn new(value: V, confidence: Confidence, rationale: impl Into<String>) -> Self {
        ConstraintEstimate {
            value,
            confidence,
            rationale: rationale.into(),
            evidence_refs: Vec::new(),
        }
    }

    pub fn with_refs<I, S>(mut self, refs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.evidence_refs.extend(refs.into_iter().map(Into::into));
        self
    }

    fn user_override(value: V) -> Self {
        ConstraintEstimate::new(value, Confidence::High, "user override").with_refs(["user-override"])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Platform {
    #[serde(rename = "x86_64")]
    X86_64,
    #[serde(rename = "aarch64")]
    Aarch64,
    #[serde(rename = "any")]
    Any,
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::X86_64 => "x86_64",
            Platform::Aarch64 => "aarch64",
            Platform::Any => "any",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IsaFeature {
    Avx,
    Avx2,
    Avx512,
}

impl IsaFeature {
    pub fn as_str(self) -> &'static str {
        match self {
            IsaFeature::Avx => "avx",
            IsaFeature::Avx2 => "avx2",
            IsaFeature::Avx512 => "avx512",
        }
    }
}

impl fmt::Display for IsaFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IsaFeature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "avx" | "avx1" => Ok(IsaFeature::Avx),
            "avx2" => Ok(IsaFeature::Avx2),
            "avx512" | "avx-512" | "avx512f" => Ok(IsaFeature::Avx512),
            other => Err(format!("unknown ISA feature `{other}`")),
        }
    }
}

pub type IsaSet = BTreeSet<IsaFeature>;

/// Closes a feature set under avx512 ⇒ avx2 ⇒ avx.
pub fn close_isa(features: &IsaSet) -> IsaSet {
    let mut out = features.clone();
    if out.contains(&IsaFeature::Avx512) {
        out.insert(IsaFeature::Avx2);
    }
    if out.contains(&IsaFeature::Avx2) {
        out.insert(IsaFeature::Avx);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoIntensity {
    Minimal,
    Moderate,
    Heavy,
}

impl fmt::Display for IoIntensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IoIntensity::Minimal => "minimal",
            IoIntensity::Moderate => "moderate",
            IoIntensity::Heavy => "heavy",
        })
    }
}

/// One field of the bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    MemHwmGb,
    CpuCount,
    Platform,
    IsaFeatures,
    GpuRequired,
    GpuCount,
    GpuMemGb,
    IoIntensity,
    DiskGb,
}

impl Dimension {
    pub const ALL: [Dimension; 9] = [
        Dimension::Platform,
        Dimension::IsaFeatures,
        Dimension::CpuCount,
        Dimension::MemHwmGb,
        Dimension::GpuRequired,
        Dimension::GpuCount,
        Dimension::GpuMemGb,
        Dimension::IoIntensity,
        Dimension::DiskGb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::MemHwmGb => "mem_hwm_gb",
            Dimension::CpuCount => "cpu_count",
            Dimension::Platform => "platform",
            Dimension::IsaFeatures => "isa_features",
            Dimension::GpuRequired => "gpu_required",
            Dimension::GpuCount => "gpu_count",
            Dimension::GpuMemGb => "gpu_mem_gb",
            Dimension::IoIntensity => "io_intensity",
            Dimension::DiskGb => "disk_gb",
        }
    }

    pub fn parse(name: &str) -> Option<Dimension> {
        Dimension::ALL.into_iter().find(|d| d.as_str() == name)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Marker serialized as the fixed `"schema"` tag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BundleSchema;

impl Serialize for BundleSchema {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(BUNDLE_SCHEMA)
    }
}

impl<'de> Deserialize<'de> for BundleSchema {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tag = String::deserialize(d)?;
        if tag == BUNDLE_SCHEMA {
            Ok(BundleSchema)
        } else {
            Err(serde::de::Error::custom(format!(
                "unsupported schema `{tag}`, expected `{BUNDLE_SCHEMA}`"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBundle {
    pub schema: BundleSchema,
    pub mem_hwm_gb: ConstraintEstimate<f64>,
    pub cpu_count: ConstraintEstimate<u32>,
    pub platform: ConstraintEstimate<Platform>,
    pub isa_features: ConstraintEstimate<IsaSet>,
    pub gpu_required: ConstraintEstimate<bool>,
    pub gpu_count: ConstraintEstimate<u32>,
    pub gpu_mem_gb: ConstraintEstimate<f64>,
    pub io_intensity: ConstraintEstimate<IoIntensity>,
    pub disk_gb: ConstraintEstimate<f64>,
}

impl ConstraintBundle {
    /// Bundle with every dimension at its no-evidence default and low confidence.
    pub fn no_evidence() -> Self {
        let why = "no evidence; conservative default";
        ConstraintBundle {
            schema: BundleSchema,
            mem_hwm_gb: ConstraintEstimate::new(NO_EVIDENCE_MEMORY_GB, Confidence::Low, why),
            cpu_count: ConstraintEstimate::new(1, Confidence::Low, why),
            platform: ConstraintEstimate::new(Platform::Any, Confidence::Low, why),
            isa_features: ConstraintEstimate::new(IsaSet::new(), Confidence::Low, why),
            gpu_required: ConstraintEstimate::new(false, Confidence::Low, why),
            gpu_count: ConstraintEstimate::new(0, Confidence::Low, why),
            gpu_mem_gb: ConstraintEstimate::new(0.0, Confidence::Low, why),
            io_intensity: ConstraintEstimate::new(IoIntensity::Minimal, Confidence::Low, why),
            disk_gb: ConstraintEstimate::new(NO_EVIDENCE_DISK_GB, Confidence::Low, why),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("bundle serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, serde_json::Error> {
        ConstraintBundle::deserialize(value)
    }

    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `(dimension, confidence, rationale)` for every field, in display order.
    pub fn rationales(&self) -> Vec<(Dimension, Confidence, &str)> {
        Dimension::ALL
            .into_iter()
            .map(|d| {
                let (c, r) = match d {
                    Dimension::MemHwmGb => (self.mem_hwm_gb.confidence, &self.mem_hwm_gb.rationale),
                    Dimension::CpuCount => (self.cpu_count.confidence, &self.cpu_count.rationale),
                    Dimension::Platform => (self.platform.confidence, &self.platform.rationale),
                    Dimension::IsaFeatures => (self.isa_features.confidence, &self.isa_features.rationale),
                    Dimension::GpuRequired => (self.gpu_required.confidence, &self.gpu_required.rationale),
                    Dimension::GpuCount => (self.gpu_count.confidence, &self.gpu_count.rationale),
                    Dimension::GpuMemGb => (self.gpu_mem_gb.confidence, &self.gpu_mem_gb.rationale),
                    Dimension::IoIntensity => (self.io_intensity.confidence, &self.io_intensity.rationale),
                    Dimension::DiskGb => (self.disk_gb.confidence, &self.disk_gb.rationale),
                };
                (d, c, r.as_str())
            })
            .collect()
    }

    /// One-line human summary of the values.
    pub fn summary(&self) -> String {
        let isa: Vec<&str> = self.isa_features.value.iter().map(|f| f.as_str()).collect();
        format!(
            "platform={} mem={:.2}GB (effective {:.2}GB) cpus={} isa={{{}}} gpu={}{} io={} disk={:.1}GB",
            self.platform.value,
            self.mem_hwm_gb.value,
            effective_instance_memory_gb(self),
            self.cpu_count.value,
            isa.join(","),
            self.gpu_required.value,
            if self.gpu_required.value {
                format!(" x{} ({:.1}GB/device)", self.gpu_count.value, self.gpu_mem_gb.value)
            } else {
                String::new()
            },
            self.io_intensity.value,
            self.disk_gb.value,
        )
    }
}

/// User-supplied values for any subset of dimensions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialBundle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_hwm_gb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<Platform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isa_features: Option<IsaSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_required: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_mem_gb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub io_intensity: Option<IoIntensity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disk_gb: Option<f64>,
}

impl PartialBundle {
    pub fn is_empty(&self) -> bool {
        *self == PartialBundle::default()
    }
}

/// Raises the memory estimate to [`MEMORY_FLOOR_GB`]. Idempotent.
pub fn apply_estimator_floor(mut bundle: ConstraintBundle) -> ConstraintBundle {
    if !(bundle.mem_hwm_gb.value >= MEMORY_FLOOR_GB) {
        let before = bundle.mem_hwm_gb.value;
        bundle.mem_hwm_gb.value = MEMORY_FLOOR_GB;
        bundle.mem_hwm_gb.rationale.push_str(&format!(
            "; raised from {before:.3} GB to the {MEMORY_FLOOR_GB} GB estimator floor"
        ));
    }
    bundle
}

/// Instance memory needed for an application high water mark.
pub fn effective_memory_for(mem_hwm_gb: f64) -> f64 {
    (mem_hwm_gb + SYSTEM_HEADROOM_GB).max(SYSTEM_HEADROOM_GB)
}

/// `max(estimate + 2 GB, 2 GB)`: the feasibility threshold on instance memory.
pub fn effective_instance_memory_gb(bundle: &ConstraintBundle) -> f64 {
    effective_memory_for(bundle.mem_hwm_gb.value)
}

/// Replaces estimated dimensions with user-supplied values.
pub fn merge_with_overrides(mut bundle: ConstraintBundle, overrides: &UserOverrides) -> ConstraintBundle {
    if let Some(extra) = &overrides.extra_constraints {
        if let Some(v) = extra.mem_hwm_gb {
            bundle.mem_hwm_gb = ConstraintEstimate::user_override(v);
        }
        if let Some(v) = extra.cpu_count {
            bundle.cpu_count = ConstraintEstimate::user_override(v);
        }
        if let Some(v) = extra.platform {
            bundle.platform = ConstraintEstimate::user_override(v);
        }
        if let Some(v) = &extra.isa_features {
            bundle.isa_features = ConstraintEstimate::user_override(close_isa(v));
        }
        if let Some(v) = extra.gpu_required {
            bundle.gpu_required = ConstraintEstimate::user_override(v);
            if !v {
                if extra.gpu_count.is_none() {
                    bundle.gpu_count = ConstraintEstimate::user_override(0);
                }
                if extra.gpu_mem_gb.is_none() {
                    bundle.gpu_mem_gb = ConstraintEstimate::user_override(0.0);
                }
            }
        }
        if let Some(v) = extra.gpu_count {
            bundle.gpu_count = ConstraintEstimate::user_override(v);
        }
        if let Some(v) = extra.gpu_mem_gb {
            bundle.gpu_mem_gb = ConstraintEstimate::user_override(v);
        }
        if let Some(v) = extra.io_intensity {
            bundle.io_intensity = ConstraintEstimate::user_override(v);
        }
        if let Some(v) = extra.disk_gb {
            bundle.disk_gb = ConstraintEstimate::user_override(v);
        }
    }
    // --ram wins over a memory value given in extra constraints
    if let Some(ram) = overrides.ram_gb {
        bundle.mem_hwm_gb = ConstraintEstimate::user_override(ram);
    }
    bundle
}

fn check_estimate<V>(name: &str, est: &ConstraintEstimate<V>, out: &mut Vec<String>) {
    if est.rationale.trim().is_empty() {
        out.push(format!("{name}: rationale is empty"));
    }
    if est.evidence_refs.is_empty() && est.confidence != Confidence::Low {
        out.push(format!(
            "{name}: {} confidence requires at least one evidence reference",
            est.confidence
        ));
    }
}

/// Returns every invariant violation; an empty list means the bundle is valid.
pub fn validate_bundle(bundle: &ConstraintBundle) -> Vec<String> {
    let mut out = Vec::new();
    let b = bundle;
    check_estimate("mem_hwm_gb", &b.mem_hwm_gb, &mut out);
    check_estimate("cpu_count", &b.cpu_count, &mut out);
    check_estimate("platform", &b.platform, &mut out);
    check_estimate("isa_features", &b.isa_features, &mut out);
    check_estimate("gpu_required", &b.gpu_required, &mut out);
    check_estimate("gpu_count", &b.gpu_count, &mut out);
    check_estimate("gpu_mem_gb", &b.gpu_mem_gb, &mut out);
    check_estimate("io_intensity", &b.io_intensity, &mut out);
    check_estimate("disk_gb", &b.disk_gb, &mut out);

    let mem = b.mem_hwm_gb.value;
    if !(mem.is_finite() && mem >= MEMORY_FLOOR_GB) {
        out.push(format!("mem_hwm_gb: {mem} is below the {MEMORY_FLOOR_GB} GB floor"));
    }
    if b.cpu_count.value < 1 {
        out.push("cpu_count: must be at least 1".to_string());
    }
    let gpu_mem = b.gpu_mem_gb.value;
    if !(gpu_mem.is_finite() && gpu_mem >= 0.0) {
        out.push(format!("gpu_mem_gb: {gpu_mem} must be a non-negative number"));
    }
    if !b.gpu_required.value {
        if b.gpu_count.value != 0 {
            out.push(format!(
                "gpu_count: {} GPUs estimated but gpu_required is false",
                b.gpu_count.value
            ));
        }
        if gpu_mem != 0.0 {
            out.push(format!("gpu_mem_gb: {gpu_mem} GB estimated but gpu_required is false"));
        }
    }
    let isa = &b.isa_features.value;
    if isa.contains(&IsaFeature::Avx512) && !isa.contains(&IsaFeature::Avx2) {
        out.push("isa_features: avx512 requires avx2".to_string());
    }
    if isa.contains(&IsaFeature::Avx2) && !isa.contains(&IsaFeature::Avx) {
        out.push("isa_features: avx2 requires avx".to_string());
    }
    let disk = b.disk_gb.value;
    if !(disk.is_finite() && disk > 0.0) {
        out.push(format!("disk_gb: {disk} must be positive"));
    }
    out
}
