//! Tool interface, the per-pipeline result cache, and the shipped tools.

use std::collections::{BTreeMap, HashMap};
use std::path::{Component, Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::adapter::DisassemblerAdapter;
use crate::analysis::{
    calculator, detect_accel_and_io, detect_isa_features, detect_parallelism, estimate_memory_gb, extract_allocation_sizes,
    parse_elf_header, scan_python_imports, ArtifactNames, DisassemblyListing, ElfMetadata,
};
use crate::catalog::{filter_feasible, Catalog};
use crate::constraints::ConstraintBundle;
use crate::records::HistoryEvidence;
use crate::selector::{rank_instances, validate_preferences, PreferenceList};
use crate::similarity::EvidenceGraph;
use crate::submission::{ArtifactRole, JobSpec, WorkloadKind};

pub type ToolArgs = BTreeMap<String, Value>;

pub trait Tool: Send + Sync {
    fn name(&self) -> &str;
    fn description(&self) -> &str;
    fn call(&self, args: &ToolArgs) -> Result<Value, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    #[serde(default)]
    pub args: ToolArgs,
}

impl ToolCall {
    pub fn new(tool: &str, args: Value) -> Self {
        let args = match args {
            Value::Object(map) => map.into_iter().collect(),
            Value::Null => ToolArgs::new(),
            other => ToolArgs::from([("value".to_string(), other)]),
        };
        ToolCall {
            tool: tool.to_string(),
            args,
        }
    }

    /// Deterministic key: tool name plus arguments with sorted keys and
    /// lexically normalized paths.
    pub fn cache_key(&self) -> String {
        let args: BTreeMap<&String, Value> = self.args.iter().map(|(k, v)| (k, canonical_arg(k, v))).collect();
        format!("{}:{}", self.tool, serde_json::to_string(&args).expect("json values serialize"))
    }
}

fn is_path_key(key: &str) -> bool {
    key == "path" || key == "paths" || key.ends_with("_path")
}

fn canonical_arg(key: &str, v: &Value) -> Value {
    match v {
        Value::String(s) if is_path_key(key) => Value::String(normalize_path(Path::new(s)).display().to_string()),
        Value::Array(items) if is_path_key(key) => Value::Array(items.iter().map(|i| canonical_arg(key, i)).collect()),
        // serde_json maps are ordered by key, so nested objects are already canonical
        other => other.clone(),
    }
}

/// Removes `.` components, duplicate separators and resolvable `..`
/// without touching the filesystem.
pub fn normalize_path(p: &Path) -> PathBuf {
    let mut out: Vec<Component<'_>> = Vec::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => match out.last() {
                Some(Component::Normal(_)) => {
                    out.pop();
                }
                Some(Component::RootDir) | Some(Component::Prefix(_)) => {}
                _ => out.push(c),
            },
            other => out.push(other),
        }
    }
    if out.is_empty() {
        return PathBuf::from(".");
    }
    out.iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub status: ToolStatus,
    pub payload: Value,
    pub elapsed_s: f64,
}

impl ToolResult {
    pub fn is_ok(&self) -> bool {
        self.status == ToolStatus::Ok
    }
}

/// Results keyed by [`ToolCall::cache_key`]. Timeouts are never stored, so
/// an abandoned call can be retried.
#[derive(Debug, Default)]
pub struct ToolCache {
    entries: HashMap<String, ToolResult>,
}

impl ToolCache {
    pub fn get(&self, key: &str) -> Option<&ToolResult> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: String, result: ToolResult) {
        if result.status != ToolStatus::Timeout {
            self.entries.insert(key, result);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Executes tool calls for one pipeline run: registry lookup, cache,
/// per-call timeout and call accounting.
pub struct ToolRunner {
    tools: BTreeMap<String, Arc<dyn Tool>>,
    cache: ToolCache,
    timeout: Duration,
    executions: BTreeMap<String, u32>,
    requested: u32,
    cache_hits: u32,
}

impl ToolRunner {
    pub fn new(tools: Vec<Arc<dyn Tool>>, timeout: Duration) -> Self {
        let mut runner = ToolRunner {
            tools: BTreeMap::new(),
            cache: ToolCache::default(),
            timeout,
            executions: BTreeMap::new(),
            requested: 0,
            cache_hits: 0,
        };
        for t in tools {
            runner.register(t);
        }
        runner
    }

    /// Adds or replaces a tool by name.
    pub fn register(&mut self, tool: Arc<dyn Tool>) {
        self.tools.insert(tool.name().to_string(), tool);
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn tool_names(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }

    pub fn describe(&self, allowed: &[String]) -> Vec<Value> {
        self.tools
            .values()
            .filter(|t| allowed.iter().any(|a| a == t.name()))
            .map(|t| json!({"name": t.name(), "description": t.description()}))
            .collect()
    }

    /// Calls requested so far, cached or not.
    pub fn requested(&self) -> u32 {
        self.requested
    }

    pub fn cache_hits(&self) -> u32 {
        self.cache_hits
    }

    /// Times `tool` actually ran.
    pub fn executions(&self, tool: &str) -> u32 {
        self.executions.get(tool).copied().unwrap_or(0)
    }

    pub fn total_executions(&self) -> u32 {
        self.executions.values().sum()
    }

    pub fn cache(&self) -> &ToolCache {
        &self.cache
    }

    /// Runs `call` unless `allowed` excludes it. Returns the result and
    /// whether it came from the cache.
    pub fn execute(&mut self, call: &ToolCall, allowed: &[String]) -> (ToolResult, bool) {
        self.requested += 1;
        let key = call.cache_key();
        if let Some(hit) = self.cache.get(&key) {
            self.cache_hits += 1;
            return (hit.clone(), true);
        }
        let tool = match self.tools.get(&call.tool) {
            Some(t) if allowed.iter().any(|a| a == &call.tool) => Arc::clone(t),
            _ => {
                let result = ToolResult {
                    status: ToolStatus::Error,
                    payload: json!(format!("unknown or disabled tool `{}`", call.tool)),
                    elapsed_s: 0.0,
                };
                return (result, false);
            }
        };
        *self.executions.entry(call.tool.clone()).or_insert(0) += 1;
        let result = run_with_timeout(tool, call.args.clone(), self.timeout);
        self.cache.insert(key, result.clone());
        (result, false)
    }
}

/// Runs the tool on a helper thread. On timeout the thread is abandoned;
/// its eventual result is dropped and never reaches the cache.
fn run_with_timeout(tool: Arc<dyn Tool>, args: ToolArgs, timeout: Duration) -> ToolResult {
    let started = Instant::now();
    let (tx, rx) = mpsc::channel();
    let spawned = std::thread::Builder::new()
        .name(format!("tool-{}", tool.name()))
        .spawn(move || {
            let _ = tx.send(tool.call(&args));
        });
    if let Err(e) = spawned {
        return ToolResult {
            status: ToolStatus::Error,
            payload: json!(format!("cannot start tool: {e}")),
            elapsed_s: 0.0,
        };
    }
    match rx.recv_timeout(timeout) {
        Ok(Ok(payload)) => ToolResult {
            status: ToolStatus::Ok,
            payload,
            elapsed_s: started.elapsed().as_secs_f64(),
        },
        Ok(Err(message)) => ToolResult {
            status: ToolStatus::Error,
            payload: json!(message),
            elapsed_s: started.elapsed().as_secs_f64(),
        },
        Err(mpsc::RecvTimeoutError::Timeout) => ToolResult {
            status: ToolStatus::Timeout,
            payload: json!(format!("no result within {} s", timeout.as_secs_f64())),
            elapsed_s: started.elapsed().as_secs_f64(),
        },
        Err(mpsc::RecvTimeoutError::Disconnected) => ToolResult {
            status: ToolStatus::Error,
            payload: json!("tool panicked"),
            elapsed_s: started.elapsed().as_secs_f64(),
        },
    }
}

/// What the stage-one tools can see.
#[derive(Debug, Clone)]
pub struct JobContext {
    pub job: JobSpec,
    pub history: Vec<HistoryEvidence>,
    pub disassembler: DisassemblerAdapter,
}

impl JobContext {
    pub fn evidence(&self) -> Vec<PathBuf> {
        self.job.artifacts(ArtifactRole::EvidenceFile).map(Path::to_path_buf).collect()
    }

    pub fn source_roots(&self) -> Vec<PathBuf> {
        self.job.artifacts(ArtifactRole::SourceTree).map(Path::to_path_buf).collect()
    }

    fn listing(&self, path: &Path) -> Result<DisassemblyListing, String> {
        self.disassembler
            .listing(path, &self.evidence())
            .map(|(l, _)| l)
            .map_err(|e| e.to_string())
    }

    /// Names from whatever the entry point offers: ELF metadata and a
    /// listing for binaries, imports for scripts.
    fn names(&self, path: &Path) -> Result<ArtifactNames, String> {
        match self.job.workload_kind {
            WorkloadKind::CompiledBinary => {
                let meta = parse_elf_header(path).ok();
                let listing = self.listing(path).ok();
                if meta.is_none() && listing.is_none() {
                    return Err(format!("{} yields neither ELF metadata nor a listing", path.display()));
                }
                Ok(ArtifactNames::from_artifacts(meta.as_ref(), listing.as_ref()))
            }
            WorkloadKind::InterpretedEntryPoint => {
                let scan = scan_python_imports(path, &self.source_roots()).map_err(|e| e.to_string())?;
                Ok(ArtifactNames::default().with_modules(scan.modules))
            }
            WorkloadKind::ShellScript => Ok(ArtifactNames::default()),
        }
    }
}

fn path_arg(args: &ToolArgs) -> Result<PathBuf, String> {
    args.get("path")
        .and_then(Value::as_str)
        .map(PathBuf::from)
        .ok_or_else(|| "missing string argument `path`".to_string())
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("tool payloads serialize")
}

macro_rules! tool {
    ($ty:ident, $name:literal, $desc:literal, |$this:ident, $args:ident| $body:expr) => {
        pub struct $ty(pub Arc<JobContext>);

        impl Tool for $ty {
            fn name(&self) -> &str {
                $name
            }
            fn description(&self) -> &str {
                $desc
            }
            fn call(&self, $args: &ToolArgs) -> Result<Value, String> {
                let $this = &self.0;
                $body
            }
        }
    };
}

tool!(ReadElf, "read_elf", "ELF machine, class, DT_NEEDED libraries and dynamic symbols of {path}", |ctx, args| {
    let _ = ctx;
    let meta: ElfMetadata = parse_elf_header(&path_arg(args)?).map_err(|e| e.to_string())?;
    Ok(to_json(&meta))
});

tool!(DetectIsa, "detect_isa", "vector ISA extensions used by the disassembly of {path}", |ctx, args| {
    let listing = ctx.listing(&path_arg(args)?)?;
    let features = detect_isa_features(&listing);
    Ok(json!({"features": features, "instructions": listing.lines.len()}))
});

tool!(
    ExtractAllocations,
    "extract_allocations",
    "heap allocation sizes at allocator call sites in {path}; optional {reachable} restricts the sum to those functions",
    |ctx, args| {
        let listing = ctx.listing(&path_arg(args)?)?;
        let sites = extract_allocation_sizes(&listing, &crate::analysis::disasm::default_allocators());
        let reachable: Option<std::collections::BTreeSet<String>> = args
            .get("reachable")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect());
        let estimate = estimate_memory_gb(&sites, reachable.as_ref());
        Ok(json!({"sites": sites, "estimate": estimate, "filtered": reachable.is_some()}))
    }
);

tool!(
    ReadCallGraph,
    "read_call_graph",
    "functions reachable from {root} (default main) in the call-graph evidence file {path}",
    |ctx, args| {
        let _ = ctx;
        let graph = EvidenceGraph::load(&path_arg(args)?).map_err(|e| e.to_string())?;
        let root = args.get("root").and_then(Value::as_str).unwrap_or("main");
        let reachable = graph.reachable_labels(root);
        if reachable.is_empty() {
            return Err(format!("root `{root}` not in call graph"));
        }
        Ok(json!({"root": root, "reachable": reachable, "nodes": graph.nodes.len()}))
    }
);

tool!(
    DetectParallelism,
    "detect_parallelism",
    "CPU count from OpenMP/MPI markers in {path} combined with the job's environment and launcher arguments",
    |ctx, args| {
        let names = ctx.names(&path_arg(args)?)?;
        let est = detect_parallelism(&names, &ctx.job.invocation.env, &ctx.job.invocation.args).map_err(|e| e.to_string())?;
        Ok(to_json(&est))
    }
);

tool!(
    DetectAccelIo,
    "detect_accel_io",
    "GPU requirement and I/O intensity from library, symbol and import markers of {path}",
    |ctx, args| {
        let names = ctx.names(&path_arg(args)?)?;
        Ok(to_json(&detect_accel_and_io(&names)))
    }
);

tool!(ScanImports, "scan_imports", "modules imported by the script {path} and its local module tree", |ctx, args| {
    let scan = scan_python_imports(&path_arg(args)?, &ctx.source_roots()).map_err(|e| e.to_string())?;
    Ok(to_json(&scan))
});

tool!(SimilarJobs, "similar_jobs", "prior runs similar to this job, with their measurements and failure reasons", |ctx, args| {
    let _ = args;
    Ok(to_json(&ctx.history))
});

tool!(MeasureInputs, "measure_inputs", "sizes of the input files named on the command line", |ctx, args| {
    let _ = args;
    let base = ctx.job.entry_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut files = Vec::new();
    let mut total: u64 = 0;
    for arg in ctx.job.invocation.args.iter().skip(1) {
        let p = Path::new(arg.split_once('=').map_or(arg.as_str(), |(_, v)| v));
        let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if let Ok(meta) = std::fs::metadata(&p) {
            if meta.is_file() {
                total += meta.len();
                files.push(json!({"path": p.display().to_string(), "bytes": meta.len()}));
            }
        }
    }
    Ok(json!({"files": files, "total_bytes": total}))
});

pub struct Calculator;

impl Tool for Calculator {
    fn name(&self) -> &str {
        "calculator"
    }
    fn description(&self) -> &str {
        "exact arithmetic with byte units (B, KB, MB, GB, TB, KiB, MiB, GiB, TiB) and `in` conversion"
    }
    fn call(&self, args: &ToolArgs) -> Result<Value, String> {
        let expr = args
            .get("expression")
            .and_then(Value::as_str)
            .ok_or("missing string argument `expression`")?;
        let q = calculator::evaluate(expr).map_err(|e| e.to_string())?;
        Ok(json!({"value": q.to_f64(), "unit": q.unit, "exact": q.to_string()}))
    }
}

/// Stage-one tool suite over one job.
pub fn constraint_tools(ctx: Arc<JobContext>) -> Vec<Arc<dyn Tool>> {
    vec![
        Arc::new(ReadElf(Arc::clone(&ctx))),
        Arc::new(DetectIsa(Arc::clone(&ctx))),
        Arc::new(ExtractAllocations(Arc::clone(&ctx))),
        Arc::new(ReadCallGraph(Arc::clone(&ctx))),
        Arc::new(DetectParallelism(Arc::clone(&ctx))),
        Arc::new(DetectAccelIo(Arc::clone(&ctx))),
        Arc::new(ScanImports(Arc::clone(&ctx))),
        Arc::new(SimilarJobs(Arc::clone(&ctx))),
        Arc::new(MeasureInputs(ctx)),
        Arc::new(Calculator),
    ]
}

fn bundle_arg(args: &ToolArgs) -> Result<ConstraintBundle, String> {
    let v = args.get("bundle").ok_or("missing argument `bundle`")?;
    ConstraintBundle::from_json(v).map_err(|e| format!("bundle: {e}"))
}

macro_rules! catalog_tool {
    ($ty:ident, $name:literal, $desc:literal, |$cat:ident, $args:ident| $body:expr) => {
        pub struct $ty(pub Arc<Catalog>);

        impl Tool for $ty {
            fn name(&self) -> &str {
                $name
            }
            fn description(&self) -> &str {
                $desc
            }
            fn call(&self, $args: &ToolArgs) -> Result<Value, String> {
                let $cat = &self.0;
                $body
            }
        }
    };
}

catalog_tool!(FilterFeasible, "filter_feasible", "offers meeting every hard constraint of {bundle}", |cat, args| {
    let bundle = bundle_arg(args)?;
    let feasible = filter_feasible(cat, &bundle);
    let names: Vec<String> = feasible.iter().map(|o| format!("{}/{}", o.provider, o.name)).collect();
    Ok(json!({"count": feasible.len(), "catalog_size": cat.len(), "offers": names}))
});

catalog_tool!(RankInstances, "rank_instances", "up to 10 feasible offers for {bundle}, best first, with rationale", |cat, args| {
    let bundle = bundle_arg(args)?;
    let prefs = rank_instances(&filter_feasible(cat, &bundle), &bundle).map_err(|e| e.to_string())?;
    Ok(to_json(&PreferenceList::from_preferences(&prefs)))
});

catalog_tool!(
    ValidatePreferences,
    "validate_preferences",
    "hard-constraint and existence violations of {items} against {bundle}",
    |cat, args| {
        let bundle = bundle_arg(args)?;
        let list = PreferenceList {
            schema: crate::selector::PREFERENCES_SCHEMA.to_string(),
            items: serde_json::from_value(args.get("items").cloned().unwrap_or(Value::Null)).map_err(|e| format!("items: {e}"))?,
        };
        let prefs = list.resolve(cat).map_err(|e| e.to_string())?;
        let found = validate_preferences(&prefs, cat, &bundle);
        Ok(json!({"violations": found.iter().map(|(r, v)| json!({"rank": r, "violation": v})).collect::<Vec<_>>()}))
    }
);

catalog_tool!(CatalogExists, "catalog_exists", "whether {provider}/{name} is a real offer", |cat, args| {
    let provider = args.get("provider").and_then(Value::as_str).ok_or("missing `provider`")?;
    let name = args.get("name").and_then(Value::as_str).ok_or("missing `name`")?;
    Ok(json!(crate::catalog::exists(cat, provider, name)))
});

/// Stage-two tool suite over a (possibly provider-filtered) catalog.
pub fn selection_tools(catalog: Arc<Catalog>) -> Vec<Arc<dyn Tool>> {
    vec![
        Arc::new(FilterFeasible(Arc::clone(&catalog))),
        Arc::new(RankInstances(Arc::clone(&catalog))),
        Arc::new(ValidatePreferences(Arc::clone(&catalog))),
        Arc::new(CatalogExists(catalog)),
        Arc::new(Calculator),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Counting(Arc<AtomicU32>);
    impl Tool for Counting {
        fn name(&self) -> &str {
            "probe"
        }
        fn description(&self) -> &str {
            "counts calls"
        }
        fn call(&self, args: &ToolArgs) -> Result<Value, String> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(json!(args.len()))
        }
    }

    struct Sleepy;
    impl Tool for Sleepy {
        fn name(&self) -> &str {
            "sleepy"
        }
        fn description(&self) -> &str {
            "never answers in time"
        }
        fn call(&self, _: &ToolArgs) -> Result<Value, String> {
            std::thread::sleep(Duration::from_secs(2));
            Ok(json!(true))
        }
    }

    #[test]
    fn cache_key_is_canonical() {
        let a = ToolCall::new("read_elf", json!({"path": "./bin/../bin/cg.D.x", "x": 1}));
        let b = ToolCall::new("read_elf", json!({"x": 1, "path": "bin//cg.D.x"}));
        assert_eq!(a.cache_key(), b.cache_key());
        assert_ne!(a.cache_key(), ToolCall::new("detect_isa", json!({"path": "bin/cg.D.x", "x": 1})).cache_key());
        assert_eq!(normalize_path(Path::new("/a/./b/../c")), PathBuf::from("/a/c"));
        assert_eq!(normalize_path(Path::new("../x")), PathBuf::from("../x"));
    }

    #[test]
    fn duplicate_calls_execute_once() {
        let count = Arc::new(AtomicU32::new(0));
        let mut runner = ToolRunner::new(vec![Arc::new(Counting(Arc::clone(&count)))], Duration::from_secs(5));
        let allowed = vec!["probe".to_string()];
        let call = ToolCall::new("probe", json!({"path": "a"}));
        let (first, cached) = runner.execute(&call, &allowed);
        assert!(first.is_ok() && !cached);
        let (second, cached) = runner.execute(&call, &allowed);
        assert!(cached);
        assert_eq!(first, second);
        assert_eq!(count.load(Ordering::SeqCst), 1);
        assert_eq!(runner.executions("probe"), 1);
        assert_eq!(runner.requested(), 2);
    }

    #[test]
    fn timeouts_are_not_cached() {
        let mut runner = ToolRunner::new(vec![Arc::new(Sleepy)], Duration::from_millis(50));
        let allowed = vec!["sleepy".to_string()];
        let call = ToolCall::new("sleepy", json!({}));
        assert_eq!(runner.execute(&call, &allowed).0.status, ToolStatus::Timeout);
        assert!(runner.cache().is_empty());
        let (_, cached) = runner.execute(&call, &allowed);
        assert!(!cached);
        assert_eq!(runner.executions("sleepy"), 2);
    }

    #[test]
    fn disabled_tools_are_errors() {
        let mut runner = ToolRunner::new(vec![Arc::new(Calculator)], Duration::from_secs(5));
        let call = ToolCall::new("calculator", json!({"expression": "1 GiB in B"}));
        assert_eq!(runner.execute(&call, &[]).0.status, ToolStatus::Error);
        let (ok, _) = runner.execute(&call, &["calculator".to_string()]);
        assert_eq!(ok.payload["value"], json!(1073741824.0));
    }
}
