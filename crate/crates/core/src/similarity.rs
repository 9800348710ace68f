//! Labeled evidence graphs, the Weisfeiler-Lehman subtree kernel, and
//! retrieval of similar prior jobs.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{DisassemblyListing, ElfMetadata, ImportScan};
use crate::num::Scalar;
use crate::analysis::adapter::DisassemblerAdapter;
use crate::submission::{ArtifactRole, InvocationContext, JobSpec, WorkloadKind};

/// WL iteration depth.
pub const WL_ITERATIONS: usize = 3;
/// Minimum normalized executable-graph similarity for a history match.
pub const DEFAULT_EXEC_THRESHOLD: f64 = 0.8;
/// Successful runs surfaced per lookup.
pub const MAX_SUCCESS_MATCHES: usize = 3;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("cannot compare a {0:?} graph with a {1:?} graph")]
    KindMismatch(GraphKind, GraphKind),
    #[error("graph has an empty feature vector")]
    EmptyGraph,
    #[error("invalid evidence graph: {0}")]
    InvalidGraph(String),
    #[error("cannot read evidence graph {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    CallGraph,
    InvocationGraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: u64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceGraph {
    pub kind: GraphKind,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(u64, u64)>,
}

impl EvidenceGraph {
    pub fn new(kind: GraphKind) -> Self {
        EvidenceGraph {
            kind,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Appends a node with the next free id.
    pub fn add_node(&mut self, label: impl Into<String>) -> u64 {
        let id = self.nodes.len() as u64;
        self.nodes.push(GraphNode { id, label: label.into() });
        id
    }

    pub fn add_edge(&mut self, src: u64, dst: u64) {
        self.edges.push((src, dst));
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<(), SimilarityError> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(SimilarityError::InvalidGraph(format!("duplicate node id {}", n.id)));
            }
            if n.label.is_empty() {
                return Err(SimilarityError::InvalidGraph(format!("node {} has an empty label", n.id)));
            }
        }
        for (s, d) in &self.edges {
            if !ids.contains(s) || !ids.contains(d) {
                return Err(SimilarityError::InvalidGraph(format!("edge [{s},{d}] references a missing node")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, SimilarityError> {
        let g: EvidenceGraph =
            serde_json::from_str(text).map_err(|e| SimilarityError::InvalidGraph(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, SimilarityError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimilarityError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_str(&text)
    }

    /// Labels reachable along out-edges from any node labeled `root`.
    pub fn reachable_labels(&self, root: &str) -> BTreeSet<String> {
        let label: HashMap<u64, &str> = self.nodes.iter().map(|n| (n.id, n.label.as_str())).collect();
        let mut out_edges: HashMap<u64, Vec<u64>> = HashMap::new();
        for &(s, d) in &self.edges {
            out_edges.entry(s).or_default().push(d);
        }
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<u64> = self.nodes.iter().filter(|n| n.label == root).map(|n| n.id).collect();
        while let Some(v) = queue.pop_front() {
            if !seen.insert(v) {
                continue;
            }
            queue.extend(out_edges.get(&v).into_iter().flatten().copied());
        }
        seen.into_iter().filter_map(|id| label.get(&id).map(|l| l.to_string())).collect()
    }

    /// Same graph with node ids remapped by `f` (labels and structure kept).
    pub fn map_ids(&self, f: impl Fn(u64) -> u64) -> EvidenceGraph {
        EvidenceGraph {
            kind: self.kind,
            nodes: self.nodes.iter().map(|n| GraphNode { id: f(n.id), label: n.label.clone() }).collect(),
            edges: self.edges.iter().map(|&(s, d)| (f(s), f(d))).collect(),
        }
    }
}

/// Syntactic class of one command-line token.
pub fn classify_token(token: &str) -> &'static str {
    if token.parse::<i64>().is_ok() {
        "int"
    } else if token.parse::<f64>().is_ok() && token.chars().any(|c| c.is_ascii_digit()) {
        "float"
    } else if token.starts_with('-') && token.len() > 1 {
        "flag"
    } else if token.contains('/') || token.starts_with('.') || token.starts_with('~') {
        "path"
    } else {
        "word"
    }
}

/// Typed graph of the arguments (by position) and environment (by name).
pub fn build_invocation_graph(ctx: &InvocationContext) -> EvidenceGraph {
    let mut g = EvidenceGraph::new(GraphKind::InvocationGraph);
    let root = g.add_node("invocation");
    for arg in &ctx.args {
        let node = g.add_node(format!("arg:{}", classify_token(arg)));
        g.add_edge(root, node);
        let value = g.add_node(if arg.is_empty() { "\"\"".to_string() } else { arg.clone() });
        g.add_edge(node, value);
    }
    for (name, value) in &ctx.env {
        let node = g.add_node(format!("env:{name}"));
        g.add_edge(root, node);
        let child = g.add_node(format!("{}:{value}", classify_token(value)));
        g.add_edge(node, child);
    }
    g
}

/// Call graph from a listing: one node per symbol span, one edge per call
/// or jump to a named target. Without a listing, an ELF-level stand-in:
/// the binary, its library deps and its undefined symbols.
pub fn exec_graph_from_binary(meta: Option<&ElfMetadata>, listing: Option<&DisassemblyListing>) -> EvidenceGraph {
    let mut g = EvidenceGraph::new(GraphKind::CallGraph);
    let mut ids: BTreeMap<String, u64> = BTreeMap::new();
    let mut node = |g: &mut EvidenceGraph, name: &str| -> u64 {
        *ids.entry(name.to_string()).or_insert_with(|| g.add_node(name))
    };
    if let Some(listing) = listing.filter(|l| !l.is_empty()) {
        let mut edges = BTreeSet::new();
        for (span_name, &(start, end)) in &listing.symbol_spans {
            let caller = span_name.split('#').next().unwrap_or(span_name);
            let src = node(&mut g, caller);
            for insn in &listing.lines[start..end] {
                if let Some(target) = insn.target_symbol().filter(|_| insn.is_call() || insn.mnemonic.starts_with('j') || insn.mnemonic == "b") {
                    if target != caller {
                        let dst = node(&mut g, target);
                        edges.insert((src, dst));
                    }
                }
            }
        }
        g.edges = edges.into_iter().collect();
        return g;
    }
    if let Some(meta) = meta {
        let root = node(&mut g, "binary");
        for dep in &meta.dynamic_deps {
            let d = node(&mut g, &format!("lib:{dep}"));
            g.add_edge(root, d);
        }
        for sym in meta.symbols.iter().filter(|s| s.kind == crate::analysis::elf::SymbolKind::Undefined) {
            let s = node(&mut g, &sym.name);
            g.add_edge(root, s);
        }
    }
    g
}

/// Module import graph of a script: `__main__` plus every imported module.
pub fn exec_graph_from_imports(scan: &ImportScan) -> EvidenceGraph {
    let mut g = EvidenceGraph::new(GraphKind::CallGraph);
    let mut ids: BTreeMap<String, u64> = BTreeMap::new();
    let mut node = |g: &mut EvidenceGraph, name: &str| -> u64 {
        *ids.entry(name.to_string()).or_insert_with(|| g.add_node(name))
    };
    node(&mut g, "__main__");
    for (src, dst) in &scan.edges {
        let dst_label = if scan.local_modules.contains(dst) {
            dst.clone()
        } else {
            dst.split('.').next().unwrap_or(dst).to_string()
        };
        let s = node(&mut g, src);
        let d = node(&mut g, &dst_label);
        g.add_edge(s, d);
    }
    g.edges.sort_unstable();
    g.edges.dedup();
    g
}

/// Shell script graph: the script plus the first word of every command line.
pub fn exec_graph_from_script(text: &str) -> EvidenceGraph {
    let mut g = EvidenceGraph::new(GraphKind::CallGraph);
    let root = g.add_node("script");
    let mut seen = BTreeSet::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let word = line
            .split_whitespace()
            .find(|w| !w.contains('=') || w.starts_with('-'))
            .unwrap_or(line);
        let cmd = word.rsplit('/').next().unwrap_or(word);
        if seen.insert(cmd.to_string()) {
            let n = g.add_node(format!("cmd:{cmd}"));
            g.add_edge(root, n);
        }
    }
    g
}

/// Executable and invocation graphs for a submission. A `.cfg.json`
/// evidence file wins; otherwise the graph is recovered from the entry
/// point itself.
pub fn job_graphs(job: &JobSpec) -> (EvidenceGraph, EvidenceGraph) {
    let inv = build_invocation_graph(&job.invocation);
    let evidence: Vec<_> = job.artifacts(ArtifactRole::EvidenceFile).map(Path::to_path_buf).collect();
    if let Some(g) = evidence
        .iter()
        .filter(|p| p.to_string_lossy().ends_with(".cfg.json"))
        .find_map(|p| EvidenceGraph::load(p).ok())
    {
        return (g, inv);
    }
    let exec = match job.workload_kind {
        WorkloadKind::CompiledBinary => {
            let meta = crate::analysis::parse_elf_header(&job.entry_path).ok();
            let listing = DisassemblerAdapter::from_env()
                .listing(&job.entry_path, &evidence)
                .ok()
                .map(|(l, _)| l);
            exec_graph_from_binary(meta.as_ref(), listing.as_ref())
        }
        WorkloadKind::InterpretedEntryPoint => {
            let roots: Vec<_> = job.artifacts(ArtifactRole::SourceTree).map(Path::to_path_buf).collect();
            crate::analysis::scan_python_imports(&job.entry_path, &roots)
                .map(|scan| exec_graph_from_imports(&scan))
                .unwrap_or_else(|_| EvidenceGraph::new(GraphKind::CallGraph))
        }
        WorkloadKind::ShellScript => std::fs::read_to_string(&job.entry_path)
            .map(|t| exec_graph_from_script(&t))
            .unwrap_or_else(|_| EvidenceGraph::new(GraphKind::CallGraph)),
    };
    (exec, inv)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Signature {
    Base(String),
    Refined(u64, Vec<u64>),
}

/// Label compression table shared by the graphs of one comparison.
/// New signatures are numbered in sorted order, so the assignment depends
/// only on the set of signatures and never on node ids or input order.
#[derive(Debug, Default)]
pub struct WlCompressor {
    table: BTreeMap<Signature, u64>,
}

/// Per-iteration label counts, iterations `0..=h`.
pub type WlFeatures = Vec<BTreeMap<u64, u64>>;

impl WlCompressor {
    pub fn new() -> Self {
        Self::default()
    }

    fn assign(&mut self, signatures: &[Vec<Signature>]) -> Vec<Vec<u64>> {
        let mut fresh: BTreeSet<&Signature> = BTreeSet::new();
        for sigs in signatures.iter() {
            fresh.extend(sigs.iter().filter(|s| !self.table.contains_key(*s)));
        }
        let fresh: Vec<Signature> = fresh.into_iter().cloned().collect();
        for sig in fresh {
            let next = self.table.len() as u64;
            self.table.insert(sig, next);
        }
        signatures
            .iter()
            .map(|sigs| sigs.iter().map(|s| self.table[s]).collect())
            .collect()
    }

    /// WL features of several graphs under this table.
    pub fn features(&mut self, graphs: &[&EvidenceGraph], iterations: usize) -> Vec<WlFeatures> {
        let adjacency: Vec<Vec<Vec<usize>>> = graphs
            .iter()
            .map(|g| {
                let index: HashMap<u64, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
                let mut adj = vec![Vec::new(); g.nodes.len()];
                for (s, d) in &g.edges {
                    if let (Some(&s), Some(&d)) = (index.get(s), index.get(d)) {
                        adj[s].push(d);
                        adj[d].push(s);
                    }
                }
                adj
            })
            .collect();

        let sigs: Vec<Vec<Signature>> = graphs
            .iter()
            .map(|g| g.nodes.iter().map(|n| Signature::Base(n.label.clone())).collect())
            .collect();
        let mut labels = self.assign(&sigs);
        let count = |labels: &Vec<u64>| {
            let mut m = BTreeMap::new();
            for &l in labels {
                *m.entry(l).or_insert(0u64) += 1;
            }
            m
        };
        let mut out: Vec<WlFeatures> = labels.iter().map(|l| vec![count(l)]).collect();

        for _ in 0..iterations {
            let sigs: Vec<Vec<Signature>> = labels
                .iter()
                .zip(&adjacency)
                .map(|(lab, adj)| {
                    (0..lab.len())
                        .map(|v| {
                            let mut neigh: Vec<u64> = adj[v].iter().map(|&u| lab[u]).collect();
                            neigh.sort_unstable();
                            Signature::Refined(lab[v], neigh)
                        })
                        .collect()
                })
                .collect();
            labels = self.assign(&sigs);
            for (feat, lab) in out.iter_mut().zip(&labels) {
                feat.push(count(lab));
            }
        }
        out
    }
}

/// Label-count multisets of one graph for iterations `0..=iterations`.
pub fn wl_relabel(graph: &EvidenceGraph, iterations: usize) -> WlFeatures {
    WlCompressor::new().features(&[graph], iterations).pop().expect("one graph")
}

fn dot(a: &BTreeMap<u64, u64>, b: &BTreeMap<u64, u64>) -> u64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().map(|(k, v)| v * large.get(k).copied().unwrap_or(0)).sum()
}

pub fn features_kernel(f1: &WlFeatures, f2: &WlFeatures) -> u64 {
    f1.iter().zip(f2).map(|(a, b)| dot(a, b)).sum()
}

/// WL subtree kernel: sum over iterations of label-count inner products.
pub fn wl_kernel(g1: &EvidenceGraph, g2: &EvidenceGraph, iterations: usize) -> Result<u64, SimilarityError> {
    if g1.kind != g2.kind {
        return Err(SimilarityError::KindMismatch(g1.kind, g2.kind));
    }
    let f = WlCompressor::new().features(&[g1, g2], iterations);
    Ok(features_kernel(&f[0], &f[1]))
}

fn normalize<S: Scalar>(k12: u64, k11: u64, k22: u64) -> Result<S, SimilarityError> {
    if k11 == 0 || k22 == 0 {
        return Err(SimilarityError::EmptyGraph);
    }
    if k12 == k11 && k12 == k22 {
        return Ok(S::one());
    }
    let s = S::from_count(k12) / (S::from_count(k11).sqrt() * S::from_count(k22).sqrt());
    Ok(s.max(S::zero()).min(S::one()))
}

/// `k(g1,g2) / sqrt(k(g1,g1) k(g2,g2))`, in `[0, 1]`.
pub fn normalized_similarity<S: Scalar>(
    g1: &EvidenceGraph,
    g2: &EvidenceGraph,
    iterations: usize,
) -> Result<S, SimilarityError> {
    if g1.kind != g2.kind {
        return Err(SimilarityError::KindMismatch(g1.kind, g2.kind));
    }
    let f = WlCompressor::new().features(&[g1, g2], iterations);
    normalize(
        features_kernel(&f[0], &f[1]),
        features_kernel(&f[0], &f[0]),
        features_kernel(&f[1], &f[1]),
    )
}

/// Dense symmetric matrix of kernel values over a graph set.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<S> {
    n: usize,
    data: Vec<S>,
}

impl<S: Scalar> GramMatrix<S> {
    /// Raw kernel values `k(g_i, g_j)`.
    pub fn kernel(graphs: &[&EvidenceGraph], iterations: usize) -> Result<Self, SimilarityError> {
        let raw = Self::raw(graphs, iterations)?;
        let n = graphs.len();
        Ok(GramMatrix {
            n,
            data: raw.into_iter().map(S::from_count).collect(),
        })
    }

    /// Normalized similarities; every graph must be non-empty.
    pub fn normalized(graphs: &[&EvidenceGraph], iterations: usize) -> Result<Self, SimilarityError> {
        let raw = Self::raw(graphs, iterations)?;
        let n = graphs.len();
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(normalize(raw[i * n + j], raw[i * n + i], raw[j * n + j])?);
            }
        }
        Ok(GramMatrix { n, data })
    }

    fn raw(graphs: &[&EvidenceGraph], iterations: usize) -> Result<Vec<u64>, SimilarityError> {
        if let Some(first) = graphs.first() {
            if let Some(other) = graphs.iter().find(|g| g.kind != first.kind) {
                return Err(SimilarityError::KindMismatch(first.kind, other.kind));
            }
        }
        let f = WlCompressor::new().features(graphs, iterations);
        let n = graphs.len();
        let mut raw = vec![0u64; n * n];
        for i in 0..n {
            for j in i..n {
                let k = features_kernel(&f[i], &f[j]);
                raw[i * n + j] = k;
                raw[j * n + i] = k;
            }
        }
        Ok(raw)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<S>> {
        self.data.chunks(self.n.max(1)).map(<[S]>::to_vec).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MatchOutcome {
    Success,
    Failure { reason: String },
}

/// A prior job as seen by the similarity lookup.
#[derive(Debug, Clone)]
pub struct HistoryCandidate<'a> {
    pub job_id: &'a str,
    pub created_at: DateTime<Utc>,
    pub outcome: MatchOutcome,
    pub exec_graph: &'a EvidenceGraph,
    pub inv_graph: &'a EvidenceGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatch {
    pub job_id: String,
    pub executable_score: f64,
    pub invocation_score: f64,
    pub outcome: MatchOutcome,
    pub created_at: DateTime<Utc>,
    pub note: String,
}

#[derive(Debug, Clone, Copy)]
pub struct SimilarityParams {
    pub exec_threshold: f64,
    pub iterations: usize,
    pub max_successes: usize,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        SimilarityParams {
            exec_threshold: DEFAULT_EXEC_THRESHOLD,
            iterations: WL_ITERATIONS,
            max_successes: MAX_SUCCESS_MATCHES,
        }
    }
}

/// Filters history by executable similarity, ranks survivors by
/// invocation similarity (newer first, then job id, on ties), and keeps
/// the top successes plus the best match for every distinct failure reason.
pub fn find_similar_jobs(
    query_exec: &EvidenceGraph,
    query_inv: &EvidenceGraph,
    history: &[HistoryCandidate<'_>],
    params: &SimilarityParams,
) -> Vec<SimilarityMatch> {
    let mut survivors: Vec<SimilarityMatch> = history
        .iter()
        .filter_map(|h| {
            let exec = normalized_similarity::<f64>(query_exec, h.exec_graph, params.iterations).ok()?;
            if exec < params.exec_threshold {
                return None;
            }
            let inv = normalized_similarity::<f64>(query_inv, h.inv_graph, params.iterations).unwrap_or(0.0);
            Some(SimilarityMatch {
                job_id: h.job_id.to_string(),
                executable_score: exec,
                invocation_score: inv,
                outcome: h.outcome.clone(),
                created_at: h.created_at,
                note: format!(
                    "executable similarity {exec:.3} >= {:.2}; ranked by invocation similarity {inv:.3} (no second threshold)",
                    params.exec_threshold
                ),
            })
        })
        .collect();
    survivors.sort_by(|a, b| {
        b.invocation_score
            .total_cmp(&a.invocation_score)
            .then(b.created_at.cmp(&a.created_at))
            .then(a.job_id.cmp(&b.job_id))
    });

    let mut successes = 0;
    let mut reasons = BTreeSet::new();
    survivors
        .into_iter()
        .filter(|m| match &m.outcome {
            MatchOutcome::Success => {
                successes += 1;
                successes <= params.max_successes
            }
            MatchOutcome::Failure { reason } => reasons.insert(reason.clone()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn graph(labels: &[&str], edges: &[(u64, u64)]) -> EvidenceGraph {
        let mut g = EvidenceGraph::new(GraphKind::CallGraph);
        for l in labels {
            g.add_node(*l);
        }
        g.edges = edges.to_vec();
        g
    }

    fn ctx(args: &[&str], env: &[(&str, &str)]) -> InvocationContext {
        InvocationContext {
            command: args.join(" "),
            args: args.iter().map(|s| s.to_string()).collect(),
            env: env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            wrapper_scripts: Vec::new(),
        }
    }

    #[test]
    fn invocation_graph_examples() {
        let g = build_invocation_graph(&ctx(&["./cg.D.x"], &[("OMP_NUM_THREADS", "16")]));
        let labels: Vec<&str> = g.nodes.iter().map(|n| n.label.as_str()).collect();
        assert_eq!(labels, ["invocation", "arg:path", "./cg.D.x", "env:OMP_NUM_THREADS", "int:16"]);
        assert_eq!(g.edges, [(0, 1), (1, 2), (0, 3), (3, 4)]);

        let empty = build_invocation_graph(&ctx(&[], &[]));
        assert_eq!(empty.nodes.len(), 1);
        assert!(empty.edges.is_empty());

        let a = build_invocation_graph(&ctx(&["./x", "--n", "3"], &[("A", "1.5")]));
        let b = build_invocation_graph(&ctx(&["./x", "--n", "3"], &[("A", "1.5")]));
        assert_eq!(a, b);
    }

    #[test]
    fn token_classes() {
        assert_eq!(classify_token("--size"), "flag");
        assert_eq!(classify_token("-12"), "int");
        assert_eq!(classify_token("1e-3"), "float");
        assert_eq!(classify_token("data/in.h5"), "path");
        assert_eq!(classify_token("fast"), "word");
        assert_eq!(classify_token("-"), "word");
    }

    #[test]
    fn single_node_is_stable() {
        let g = graph(&["a"], &[]);
        let f = wl_relabel(&g, 2);
        assert_eq!(f.len(), 3);
        assert!(f.iter().all(|m| m.len() == 1 && m.values().sum::<u64>() == 1));
    }

    #[test]
    fn path_graph_center_is_distinguished() {
        let g = graph(&["a", "b", "a"], &[(0, 1), (1, 2)]);
        let f = wl_relabel(&g, 1);
        let mut counts: Vec<u64> = f[1].values().copied().collect();
        counts.sort_unstable();
        assert_eq!(counts, [1, 2]);
    }

    #[test]
    fn kernel_examples() {
        let g = graph(&["main", "alloc", "solve"], &[(0, 1), (0, 2)]);
        assert!(wl_kernel(&g, &g, 3).unwrap() > 0);
        let h = graph(&["x", "y"], &[(0, 1)]);
        assert_eq!(wl_kernel(&g, &h, 3).unwrap(), 0);
        assert_eq!(normalized_similarity::<f64>(&g, &g, 3).unwrap(), 1.0);
        assert_eq!(normalized_similarity::<f64>(&g, &h, 3).unwrap(), 0.0);
        let inv = build_invocation_graph(&ctx(&["a"], &[]));
        assert!(matches!(wl_kernel(&g, &inv, 3), Err(SimilarityError::KindMismatch(..))));
        let empty = graph(&[], &[]);
        assert!(matches!(normalized_similarity::<f64>(&g, &empty, 3), Err(SimilarityError::EmptyGraph)));
    }

    #[test]
    fn isolated_fresh_node_adds_one_per_iteration() {
        let g1 = graph(&["a", "b", "c"], &[(0, 1), (1, 2)]);
        let g2 = graph(&["a", "b", "d"], &[(0, 1), (1, 2)]);
        let base = wl_kernel(&g1, &g2, 3).unwrap();
        let mut g1b = g1.clone();
        g1b.add_node("fresh");
        let mut g2b = g2.clone();
        g2b.add_node("fresh");
        assert_eq!(wl_kernel(&g1b, &g2b, 3).unwrap(), base + 4);
    }

    #[test]
    fn permutation_invariance() {
        let g = graph(&["m", "a", "b", "a"], &[(0, 1), (0, 2), (2, 3), (3, 1)]);
        let p = g.map_ids(|id| 100 - id * 7);
        let mut p_rev = p.clone();
        p_rev.nodes.reverse();
        p_rev.edges.reverse();
        assert_eq!(wl_relabel(&g, 3), wl_relabel(&p_rev, 3));
        assert_eq!(wl_kernel(&g, &g, 3).unwrap(), wl_kernel(&p_rev, &g, 3).unwrap());
    }

    #[test]
    fn graph_validation_and_json() {
        let text = r#"{"kind":"call_graph","nodes":[{"id":0,"label":"main"},{"id":1,"label":"alloc_space"}],"edges":[[0,1]]}"#;
        let g = EvidenceGraph::from_json_str(text).unwrap();
        assert_eq!(g.reachable_labels("main"), BTreeSet::from(["main".to_string(), "alloc_space".to_string()]));
        assert!(EvidenceGraph::from_json_str(r#"{"kind":"call_graph","nodes":[{"id":0,"label":"a"}],"edges":[[0,3]]}"#).is_err());
        assert!(EvidenceGraph::from_json_str(r#"{"kind":"call_graph","nodes":[{"id":0,"label":"a"},{"id":0,"label":"b"}],"edges":[]}"#).is_err());
        assert!(EvidenceGraph::from_json_str(r#"{"kind":"call_graph","nodes":[{"id":0,"label":""}],"edges":[]}"#).is_err());
    }

    fn at(secs: i64) -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000 + secs, 0).unwrap()
    }

    #[test]
    fn history_selection() {
        let exec = graph(&["main", "alloc_space"], &[(0, 1)]);
        let inv = build_invocation_graph(&ctx(&["./cg.D.x"], &[("OMP_NUM_THREADS", "8")]));
        let ids: Vec<String> = (0..8).map(|i| format!("job-{i}")).collect();
        let mut history = Vec::new();
        for i in 0..5 {
            history.push(HistoryCandidate {
                job_id: &ids[i],
                created_at: at(i as i64),
                outcome: MatchOutcome::Success,
                exec_graph: &exec,
                inv_graph: &inv,
            });
        }
        for i in 5..7 {
            history.push(HistoryCandidate {
                job_id: &ids[i],
                created_at: at(i as i64),
                outcome: MatchOutcome::Failure { reason: "out of memory on 8 GB".into() },
                exec_graph: &exec,
                inv_graph: &inv,
            });
        }
        let other = graph(&["zzz"], &[]);
        history.push(HistoryCandidate {
            job_id: &ids[7],
            created_at: at(100),
            outcome: MatchOutcome::Success,
            exec_graph: &other,
            inv_graph: &inv,
        });

        assert!(find_similar_jobs(&exec, &inv, &[], &SimilarityParams::default()).is_empty());
        let found = find_similar_jobs(&exec, &inv, &history, &SimilarityParams::default());
        let successes: Vec<&str> = found
            .iter()
            .filter(|m| m.outcome == MatchOutcome::Success)
            .map(|m| m.job_id.as_str())
            .collect();
        assert_eq!(successes, ["job-4", "job-3", "job-2"]);
        let failures: Vec<&SimilarityMatch> = found.iter().filter(|m| m.outcome != MatchOutcome::Success).collect();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].job_id, "job-6");
    }

    #[test]
    fn gram_matrix_is_symmetric() {
        let gs = [
            graph(&["a", "b"], &[(0, 1)]),
            graph(&["a", "a", "b"], &[(0, 1), (1, 2)]),
            graph(&["c"], &[]),
        ];
        let refs: Vec<&EvidenceGraph> = gs.iter().collect();
        let k = GramMatrix::<f64>::kernel(&refs, 3).unwrap();
        assert!(k.is_symmetric());
        let n = GramMatrix::<f32>::normalized(&refs, 3).unwrap();
        assert_eq!(n.get(1, 1), 1.0);
        assert_eq!(n.get(0, 2), 0.0);
        let _: BTreeMap<u64, u64> = wl_relabel(&gs[0], 0).remove(0);
    }
}
