//! Static evidence extraction from submitted artifacts. Nothing here runs
//! the workload; the only spawned process is the optional external
//! disassembler in [`adapter`].

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{Confidence, Dimension};

pub mod adapter;
pub mod calculator;
pub mod disasm;
pub mod elf;
pub mod python;
pub mod scans;

pub use disasm::{detect_isa_features, extract_allocation_sizes, AllocSite, DisassemblyListing};
pub use elf::{parse_elf_bytes, parse_elf_header, ElfMetadata, Machine};
pub use python::{scan_python_imports, ImportScan};
pub use scans::{detect_accel_and_io, detect_parallelism, estimate_memory_gb, AccelIoFindings};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("not an ELF file")]
    NotAnElf,
    #[error("ELF header is truncated")]
    TruncatedHeader,
    #[error("unsupported ELF class byte {0}")]
    UnsupportedClass(u8),
    #[error("unsupported ELF data encoding byte {0}")]
    UnsupportedEncoding(u8),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{var}={value:?} is not a positive integer thread count")]
    MalformedThreadCount { var: String, value: String },
    #[error("cannot tokenize {0} for import statements")]
    SyntaxUnreadable(PathBuf),
    #[error("no disassembler configured and no .dis listing supplied")]
    NoListing,
    #[error("{tool} did not finish within {seconds} s")]
    ToolTimeout { tool: String, seconds: f64 },
    #[error("{tool} failed: {message}")]
    ToolFailed { tool: String, message: String },
}

impl AnalysisError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AnalysisError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FindingValue {
    Number(f64),
    Text(String),
}

impl From<f64> for FindingValue {
    fn from(v: f64) -> Self {
        FindingValue::Number(v)
    }
}

impl From<&str> for FindingValue {
    fn from(v: &str) -> Self {
        FindingValue::Text(v.to_string())
    }
}

impl From<String> for FindingValue {
    fn from(v: String) -> Self {
        FindingValue::Text(v)
    }
}

impl std::fmt::Display for FindingValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FindingValue::Number(n) => write!(f, "{n}"),
            FindingValue::Text(t) => f.write_str(t),
        }
    }
}

/// One observation about one bundle dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub dimension: Dimension,
    pub value: FindingValue,
    pub confidence: Confidence,
    pub source: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub findings: Vec<Finding>,
}

impl EvidenceReport {
    pub fn push(
        &mut self,
        dimension: Dimension,
        value: impl Into<FindingValue>,
        confidence: Confidence,
        source: &str,
        detail: impl Into<String>,
    ) {
        let detail = detail.into();
        debug_assert!(!detail.is_empty());
        self.findings.push(Finding {
            dimension,
            value: value.into(),
            confidence,
            source: source.to_string(),
            detail,
        });
    }

    pub fn extend(&mut self, other: EvidenceReport) {
        self.findings.extend(other.findings);
    }

    pub fn for_dimension(&self, dimension: Dimension) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(move |f| f.dimension == dimension)
    }
}

/// Names visible in an artifact: shared-library deps, ELF symbols, call
/// targets in the listing, and imported Python modules. Marker scans for
/// parallel runtimes, accelerators and I/O libraries all run over this set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactNames {
    pub libraries: BTreeSet<String>,
    pub symbols: BTreeSet<String>,
    pub modules: BTreeSet<String>,
}

impl ArtifactNames {
    pub fn from_artifacts(meta: Option<&ElfMetadata>, listing: Option<&DisassemblyListing>) -> Self {
        let mut names = ArtifactNames::default();
        if let Some(meta) = meta {
            names.libraries.extend(meta.dynamic_deps.iter().cloned());
            names.symbols.extend(meta.symbols.iter().map(|s| s.name.clone()));
        }
        if let Some(listing) = listing {
            names.symbols.extend(listing.referenced_symbols());
            names
                .symbols
                .extend(listing.symbol_spans.keys().map(|k| k.split('#').next().unwrap_or(k).to_string()));
        }
        names
    }

    pub fn with_modules<I: IntoIterator<Item = String>>(mut self, modules: I) -> Self {
        self.modules.extend(modules);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.libraries.is_empty() && self.symbols.is_empty() && self.modules.is_empty()
    }
}
