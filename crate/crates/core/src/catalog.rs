//! Provider-normalized instance catalog: CSV ingestion, validation and the
//! feasibility queries used by instance selection.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{effective_instance_memory_gb, ConstraintBundle, IoIntensity, IsaFeature, IsaSet, Platform};

pub const CATALOG_HEADER: [&str; 14] = [
    "provider",
    "name",
    "architecture",
    "vcpus",
    "physical_cpus",
    "memory_gb",
    "accel_kind",
    "accel_count",
    "accel_mem_gb",
    "premium_storage",
    "price_per_hour_usd",
    "cpu_vendor",
    "cpu_generation",
    "isa_features",
];

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("row {row}: {message}")]
    ParseError { row: usize, message: String },
    #[error("duplicate offer {provider}/{name}")]
    DuplicateOffer { provider: String, name: String },
    #[error("row {row}: invariant violated for {field}: {message}")]
    InvariantViolation { row: usize, field: String, message: String },
    #[error("histogram edges must be strictly ascending")]
    UnsortedEdges,
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "x86_64")]
    X86_64,
    #[serde(rename = "aarch64")]
    Aarch64,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::X86_64 => "x86_64",
            Architecture::Aarch64 => "aarch64",
        }
    }

    pub fn satisfies(self, platform: Platform) -> bool {
        match platform {
            Platform::Any => true,
            Platform::X86_64 => self == Architecture::X86_64,
            Platform::Aarch64 => self == Architecture::Aarch64,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x86_64" | "amd64" => Ok(Architecture::X86_64),
            "aarch64" | "arm64" => Ok(Architecture::Aarch64),
            other => Err(format!("unknown architecture `{other}`")),
        }
    }
}

/// CPU designer. Ordering is the vendor preference used as a tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CpuVendor {
    Amd,
    Intel,
    #[serde(rename = "arm-designer")]
    Arm,
    Other,
}

impl CpuVendor {
    pub fn as_str(self) -> &'static str {
        match self {
            CpuVendor::Amd => "amd",
            CpuVendor::Intel => "intel",
            CpuVendor::Arm => "arm-designer",
            CpuVendor::Other => "other",
        }
    }
}

impl FromStr for CpuVendor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "amd" => Ok(CpuVendor::Amd),
            "intel" => Ok(CpuVendor::Intel),
            "arm" | "arm-designer" | "aws" | "ampere" => Ok(CpuVendor::Arm),
            "other" => Ok(CpuVendor::Other),
            other => Err(format!("unknown cpu vendor `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accelerator {
    pub kind: String,
    pub count: u32,
    pub mem_gb_per_device: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOffer {
    pub provider: String,
    pub name: String,
    pub architecture: Architecture,
    pub vcpus: u32,
    pub physical_cpus: Option<u32>,
    pub memory_gb: f64,
    pub accelerator: Option<Accelerator>,
    pub premium_storage: bool,
    pub price_per_hour_usd: f64,
    pub cpu_vendor: CpuVendor,
    pub cpu_generation: u32,
    pub isa_features: IsaSet,
}

impl InstanceOffer {
    pub fn key(&self) -> (&str, &str) {
        (&self.provider, &self.name)
    }

    /// One CSV record in header order.
    pub fn to_record(&self) -> Vec<String> {
        let (kind, count, mem) = match &self.accelerator {
            Some(a) => (a.kind.clone(), a.count.to_string(), fmt_num(a.mem_gb_per_device)),
            None => (String::new(), String::new(), String::new()),
        };
        vec![
            self.provider.clone(),
            self.name.clone(),
            self.architecture.to_string(),
            self.vcpus.to_string(),
            self.physical_cpus.map(|p| p.to_string()).unwrap_or_default(),
            fmt_num(self.memory_gb),
            kind,
            count,
            mem,
            self.premium_storage.to_string(),
            fmt_num(self.price_per_hour_usd),
            self.cpu_vendor.as_str().to_string(),
            self.cpu_generation.to_string(),
            self.isa_features.iter().map(|f| f.as_str()).collect::<Vec<_>>().join("|"),
        ]
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Frozen set of offers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub offers: Vec<InstanceOffer>,
    pub snapshot_label: String,
}

impl Catalog {
    pub fn new(offers: Vec<InstanceOffer>, snapshot_label: impl Into<String>) -> Result<Self, CatalogError> {
        let mut seen = BTreeSet::new();
        for o in &offers {
            if !seen.insert((o.provider.clone(), o.name.clone())) {
                return Err(CatalogError::DuplicateOffer {
                    provider: o.provider.clone(),
                    name: o.name.clone(),
                });
            }
        }
        Ok(Catalog {
            offers,
            snapshot_label: snapshot_label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.offers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offers.is_empty()
    }

    pub fn get(&self, provider: &str, name: &str) -> Option<&InstanceOffer> {
        self.offers.iter().find(|o| o.provider == provider && o.name == name)
    }

    /// Offers named `name` under any provider.
    pub fn find_by_name(&self, name: &str) -> Vec<&InstanceOffer> {
        self.offers.iter().filter(|o| o.name == name).collect()
    }

    /// Restricts to one provider.
    pub fn for_provider(&self, provider: &str) -> Catalog {
        Catalog {
            offers: self.offers.iter().filter(|o| o.provider == provider).cloned().collect(),
            snapshot_label: format!("{}[{provider}]", self.snapshot_label),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CATALOG_HEADER).expect("in-memory write");
        for o in &self.offers {
            w.write_record(o.to_record()).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn field(rec: &csv::StringRecord, idx: usize) -> &str {
    rec.get(idx).unwrap_or("").trim()
}

fn parse_num<T: FromStr>(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<T, CatalogError> {
    let raw = field(rec, idx);
    raw.parse().map_err(|_| CatalogError::ParseError {
        row,
        message: format!("{}: cannot parse {raw:?}", CATALOG_HEADER[idx]),
    })
}

fn parse_opt<T: FromStr>(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<Option<T>, CatalogError> {
    if field(rec, idx).is_empty() {
        Ok(None)
    } else {
        parse_num(rec, idx, row).map(Some)
    }
}

fn violation(row: usize, field: &str, message: impl Into<String>) -> CatalogError {
    CatalogError::InvariantViolation {
        row,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_row(rec: &csv::StringRecord, row: usize) -> Result<InstanceOffer, CatalogError> {
    if rec.len() != CATALOG_HEADER.len() {
        return Err(CatalogError::ParseError {
            row,
            message: format!("expected {} fields, found {}", CATALOG_HEADER.len(), rec.len()),
        });
    }
    let parse_err = |message: String| CatalogError::ParseError { row, message };
    let provider = field(rec, 0).to_string();
    let name = field(rec, 1).to_string();
    if provider.is_empty() {
        return Err(violation(row, "provider", "empty"));
    }
    if name.is_empty() {
        return Err(violation(row, "name", "empty"));
    }
    let architecture = field(rec, 2).parse().map_err(parse_err)?;
    let vcpus: u32 = parse_num(rec, 3, row)?;
    let physical_cpus: Option<u32> = parse_opt(rec, 4, row)?;
    let memory_gb: f64 = parse_num(rec, 5, row)?;
    let accel_kind = field(rec, 6);
    let accel_count: Option<u32> = parse_opt(rec, 7, row)?;
    let accel_mem: Option<f64> = parse_opt(rec, 8, row)?;
    let premium_storage = match field(rec, 9).to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => true,
        "false" | "0" | "no" | "" => false,
        other => return Err(parse_err(format!("premium_storage: cannot parse {other:?}"))),
    };
    let price: f64 = parse_num(rec, 10, row)?;
    let cpu_vendor = field(rec, 11).parse().map_err(|e: String| parse_err(e))?;
    let cpu_generation: i64 = parse_num(rec, 12, row)?;
    let isa_features = field(rec, 13)
        .split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<IsaFeature>())
        .collect::<Result<IsaSet, _>>()
        .map_err(parse_err)?;

    if vcpus < 1 {
        return Err(violation(row, "vcpus", "must be at least 1"));
    }
    if physical_cpus == Some(0) {
        return Err(violation(row, "physical_cpus", "must be positive when present"));
    }
    if !(memory_gb.is_finite() && memory_gb > 0.0) {
        return Err(violation(row, "memory_gb", format!("{memory_gb} is not positive")));
    }
    if !(price.is_finite() && price > 0.0) {
        return Err(violation(row, "price_per_hour_usd", format!("{price} is not positive")));
    }
    if cpu_generation < 0 {
        return Err(violation(row, "cpu_generation", "must be non-negative"));
    }
    let accelerator = match (accel_kind.is_empty(), accel_count, accel_mem) {
        (true, None, None) => None,
        (false, Some(count), Some(mem)) => {
            if count == 0 {
                return Err(violation(row, "accel_count", "must be positive"));
            }
            if !(mem.is_finite() && mem > 0.0) {
                return Err(violation(row, "accel_mem_gb", "must be positive"));
            }
            Some(Accelerator {
                kind: accel_kind.to_string(),
                count,
                mem_gb_per_device: mem,
            })
        }
        _ => return Err(violation(row, "accel_kind", "accelerator fields must be all set or all blank")),
    };
    Ok(InstanceOffer {
        provider,
        name,
        architecture,
        vcpus,
        physical_cpus,
        memory_gb,
        accelerator,
        premium_storage,
        price_per_hour_usd: price,
        cpu_vendor,
        cpu_generation: cpu_generation as u32,
        isa_features,
    })
}

/// Parses catalog CSV text. Rows are numbered from 1 after the header.
pub fn parse_catalog(text: &str, snapshot_label: &str) -> Result<Catalog, CatalogError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| CatalogError::ParseError {
        row: 0,
        message: e.to_string(),
    })?;
    let found: Vec<&str> = header.iter().collect();
    if found != CATALOG_HEADER {
        return Err(CatalogError::ParseError {
            row: 0,
            message: format!("header must be `{}`", CATALOG_HEADER.join(",")),
        });
    }
    let mut offers = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CatalogError::ParseError {
            row,
            message: e.to_string(),
        })?;
        let offer = parse_row(&rec, row)?;
        if !seen.insert((offer.provider.clone(), offer.name.clone())) {
            return Err(CatalogError::DuplicateOffer {
                provider: offer.provider,
                name: offer.name,
            });
        }
        offers.push(offer);
    }
    Ok(Catalog {
        offers,
        snapshot_label: snapshot_label.to_string(),
    })
}

/// Loads a catalog file; the snapshot label is the file stem.
pub fn load_catalog(path: &Path) -> Result<Catalog, CatalogError> {
    let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_catalog(&text, &label)
}

/// Hard predicates an offer fails for a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardViolation {
    Memory,
    Architecture,
    Isa,
    Accelerator,
    Storage,
}

pub fn hard_violations(offer: &InstanceOffer, bundle: &ConstraintBundle) -> Vec<HardViolation> {
    let mut out = Vec::new();
    if !(offer.memory_gb >= effective_instance_memory_gb(bundle)) {
        out.push(HardViolation::Memory);
    }
    if !offer.architecture.satisfies(bundle.platform.value) {
        out.push(HardViolation::Architecture);
    }
    if !offer.isa_features.is_superset(&bundle.isa_features.value) {
        out.push(HardViolation::Isa);
    }
    if bundle.gpu_required.value {
        let ok = offer.accelerator.as_ref().is_some_and(|a| {
            a.count >= bundle.gpu_count.value && a.mem_gb_per_device >= bundle.gpu_mem_gb.value
        });
        if !ok {
            out.push(HardViolation::Accelerator);
        }
    }
    if bundle.io_intensity.value == IoIntensity::Heavy && !offer.premium_storage {
        out.push(HardViolation::Storage);
    }
    out
}

pub fn is_feasible(offer: &InstanceOffer, bundle: &ConstraintBundle) -> bool {
    hard_violations(offer, bundle).is_empty()
}

/// Offers passing every hard predicate, in catalog order.
pub fn filter_feasible(catalog: &Catalog, bundle: &ConstraintBundle) -> Vec<InstanceOffer> {
    catalog.offers.iter().filter(|o| is_feasible(o, bundle)).cloned().collect()
}

pub fn exists(catalog: &Catalog, provider: &str, name: &str) -> bool {
    catalog.get(provider, name).is_some()
}

/// Counts offers per half-open bin `[e_i, e_{i+1})`.
pub fn memory_tier_histogram<'a, I>(offers: I, edges: &[f64]) -> Result<Vec<usize>, CatalogError>
where
    I: IntoIterator<Item = &'a InstanceOffer>,
{
    if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| e.is_nan()) {
        return Err(CatalogError::UnsortedEdges);
    }
    let mut bins = vec![0usize; edges.len().saturating_sub(1)];
    for o in offers {
        let idx = edges.partition_point(|&e| e <= o.memory_gb);
        if idx >= 1 && idx < edges.len() {
            bins[idx - 1] += 1;
        }
    }
    Ok(bins)
}
