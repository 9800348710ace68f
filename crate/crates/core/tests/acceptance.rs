//! Acceptance checks. Each test writes one `criterion N: PASS|FAIL` line
//! straight to stderr so the line survives output capture.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use incisor_core::agent::{
    run_pipeline, Action, AgentConfig, PipelineOptions, Reasoner, RuleBasedReasoner, StepContext, Tool, ToolCall,
};
use incisor_core::analysis::adapter::DisassemblerAdapter;
use incisor_core::catalog::{
    filter_feasible, load_catalog, memory_tier_histogram, Accelerator, Architecture, Catalog, CpuVendor,
    InstanceOffer,
};
use incisor_core::constraints::{
    close_isa, Confidence, ConstraintBundle, IoIntensity, IsaFeature, IsaSet, Platform,
};
use incisor_core::executor::{
    execute_with_recovery, parse_peak_memory, Availability, ExecutorError, RunStatus, WorkloadProfile,
};
use incisor_core::records::{history_evidence_for, JobRecord, RecordsError, Store};
use incisor_core::selector::{rank_instances, InstancePreference, PenaltyConfig};
use incisor_core::similarity::{
    job_graphs, normalized_similarity, wl_kernel, wl_relabel, EvidenceGraph, GramMatrix, GraphKind,
    SimilarityParams, WL_ITERATIONS,
};
use incisor_core::submission::{normalize_submission, SubmissionOptions};
use incisor_core::testkit::{
    cg_bundle, cg_job, cg_listing, cg_profile, fixture_path, offer, sample_record, write_cg_fixture, ElfImage,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn report(n: u32, pass: bool, elapsed: Duration, limit: Option<Duration>, detail: &str) {
    let within = limit.map_or(true, |l| elapsed < l);
    let verdict = if pass && within { "PASS" } else { "FAIL" };
    let budget = limit.map(|l| format!(" (limit {:.0?})", l)).unwrap_or_default();
    let line = format!("criterion {n}: {verdict} in {elapsed:.2?}{budget}: {detail}\n");
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {n}: {detail}");
    assert!(within, "criterion {n} took {elapsed:?}");
}

fn opts() -> PipelineOptions {
    PipelineOptions {
        disassembler: DisassemblerAdapter::default(),
        ..PipelineOptions::default()
    }
}

#[test]
fn criterion_01_cg_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_cg_fixture(dir.path()).unwrap();
    let start = Instant::now();
    let job = cg_job(dir.path(), SubmissionOptions::default());
    let catalog = load_catalog(&fixture_path("catalog/synthetic-794.csv")).unwrap();
    let out = run_pipeline(&job, &catalog, Vec::new(), &mut RuleBasedReasoner, &opts()).unwrap();
    let elapsed = start.elapsed();

    let b = &out.bundle;
    let mem_err = (b.mem_hwm_gb.value - 16.0).abs() / 16.0;
    let min_pref_mem = out.preferences.iter().map(|p| p.offer.memory_gb).fold(f64::INFINITY, f64::min);
    let pass = b.platform.value == Platform::X86_64
        && mem_err <= 0.01
        && b.cpu_count.value == 8
        && b.isa_features.value.contains(&IsaFeature::Avx)
        && !b.isa_features.value.contains(&IsaFeature::Avx512)
        && !b.gpu_required.value
        && b.io_intensity.value == IoIntensity::Minimal
        && !out.preferences.is_empty()
        && min_pref_mem >= 18.0;
    report(
        1,
        pass,
        elapsed,
        Some(Duration::from_secs(5)),
        &format!("{}; {} preferences, smallest {min_pref_mem} GB", b.summary(), out.preferences.len()),
    );
}

#[test]
fn criterion_02_catalog_semantics() {
    let start = Instant::now();
    let catalog = load_catalog(&fixture_path("catalog/synthetic-794.csv")).unwrap();
    let feasible = filter_feasible(&catalog, &cg_bundle());
    let hist = memory_tier_histogram(&catalog.offers, &[0.0, 18.0, 32.0]).unwrap();
    let elapsed = start.elapsed();
    let pass = catalog.len() == 794 && feasible.len() == 709 && hist == [85, 79];
    report(
        2,
        pass,
        elapsed,
        Some(Duration::from_secs(1)),
        &format!(
            "{} offers, {} feasible, {} below 18 GB, {} in [18, 32) GB",
            catalog.len(),
            feasible.len(),
            hist[0],
            hist[1]
        ),
    );
}

const ISA_CHOICES: [&[IsaFeature]; 4] = [
    &[],
    &[IsaFeature::Avx],
    &[IsaFeature::Avx, IsaFeature::Avx2],
    &[IsaFeature::Avx, IsaFeature::Avx2, IsaFeature::Avx512],
];

fn random_offer(rng: &mut ChaCha8Rng, i: usize) -> InstanceOffer {
    let memory_gb = *[0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 16.0, 18.0, 24.0, 32.0, 64.0, 128.0]
        .choose(rng)
        .unwrap();
    let vcpus = rng.gen_range(1..=64);
    InstanceOffer {
        provider: ["aws", "gcp", "azure"][i % 3].into(),
        name: format!("x{i}"),
        architecture: if rng.gen_bool(0.7) { Architecture::X86_64 } else { Architecture::Aarch64 },
        vcpus,
        physical_cpus: Some((vcpus / 2).max(1)),
        memory_gb,
        accelerator: rng.gen_bool(0.2).then(|| Accelerator {
            kind: "gpu".into(),
            count: rng.gen_range(1..=8),
            mem_gb_per_device: *[16.0, 24.0, 40.0, 80.0].choose(rng).unwrap(),
        }),
        premium_storage: rng.gen_bool(0.3),
        price_per_hour_usd: rng.gen_range(0.01..10.0),
        cpu_vendor: *[CpuVendor::Amd, CpuVendor::Intel, CpuVendor::Arm].choose(rng).unwrap(),
        cpu_generation: rng.gen_range(1..10),
        isa_features: ISA_CHOICES.choose(rng).unwrap().iter().copied().collect(),
    }
}

fn random_bundle(rng: &mut ChaCha8Rng) -> ConstraintBundle {
    let mut b = cg_bundle();
    // values two below offer sizes hit the threshold exactly
    b.mem_hwm_gb.value = *[0.0, 1.0, 4.0, 6.0, 8.0, 14.0, 16.0, 16.5, 22.0, 30.0, 62.0, 100.0].choose(rng).unwrap();
    b.mem_hwm_gb.confidence = *[Confidence::Low, Confidence::Medium, Confidence::High].choose(rng).unwrap();
    b.cpu_count.value = rng.gen_range(1..=64);
    b.platform.value = *[Platform::X86_64, Platform::Aarch64, Platform::Any].choose(rng).unwrap();
    b.isa_features.value = ISA_CHOICES.choose(rng).unwrap().iter().copied().collect();
    b.gpu_required.value = rng.gen_bool(0.25);
    if b.gpu_required.value {
        b.gpu_count.value = rng.gen_range(1..=4);
        b.gpu_mem_gb.value = *[8.0, 16.0, 24.0, 48.0].choose(rng).unwrap();
    } else {
        b.gpu_count.value = 0;
        b.gpu_mem_gb.value = 0.0;
    }
    b.io_intensity.value = *[IoIntensity::Minimal, IoIntensity::Moderate, IoIntensity::Heavy].choose(rng).unwrap();
    b
}

/// Feasibility written out longhand, one predicate at a time.
fn oracle_feasible(o: &InstanceOffer, b: &ConstraintBundle) -> bool {
    let need_mem = (b.mem_hwm_gb.value + 2.0).max(2.0);
    if o.memory_gb < need_mem {
        return false;
    }
    let arch_ok = match b.platform.value {
        Platform::Any => true,
        Platform::X86_64 => o.architecture == Architecture::X86_64,
        Platform::Aarch64 => o.architecture == Architecture::Aarch64,
    };
    if !arch_ok {
        return false;
    }
    for f in &b.isa_features.value {
        if !o.isa_features.contains(f) {
            return false;
        }
    }
    if b.gpu_required.value {
        match &o.accelerator {
            None => return false,
            Some(a) => {
                if a.count < b.gpu_count.value || a.mem_gb_per_device < b.gpu_mem_gb.value {
                    return false;
                }
            }
        }
    }
    !(b.io_intensity.value == IoIntensity::Heavy && !o.premium_storage)
}

#[test]
fn criterion_03_feasibility_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    let mut discrepancies = 0;
    let mut total_feasible = 0;
    for _ in 0..500 {
        let n = rng.gen_range(0..=1000);
        let offers: Vec<InstanceOffer> = (0..n).map(|i| random_offer(&mut rng, i)).collect();
        let catalog = Catalog::new(offers, "random").unwrap();
        let bundle = random_bundle(&mut rng);
        let got: BTreeSet<(String, String)> = filter_feasible(&catalog, &bundle)
            .into_iter()
            .map(|o| (o.provider, o.name))
            .collect();
        let mut want = BTreeSet::new();
        for o in &catalog.offers {
            if oracle_feasible(o, &bundle) {
                want.insert((o.provider.clone(), o.name.clone()));
            }
        }
        total_feasible += want.len();
        if got != want {
            discrepancies += 1;
        }
    }
    report(
        3,
        discrepancies == 0,
        start.elapsed(),
        Some(Duration::from_secs(10)),
        &format!("500 random pairs, {discrepancies} discrepancies, {total_feasible} feasible offers in total"),
    );
}

fn random_graph(rng: &mut ChaCha8Rng) -> EvidenceGraph {
    let mut g = EvidenceGraph::new(GraphKind::CallGraph);
    let n = rng.gen_range(1..=30);
    for _ in 0..n {
        g.add_node(*["a", "b", "c", "d", "e"].choose(rng).unwrap());
    }
    let m = rng.gen_range(0..=2 * n);
    for _ in 0..m {
        g.add_edge(rng.gen_range(0..n as u64), rng.gen_range(0..n as u64));
    }
    g
}

/// Same graph with fresh node ids and shuffled node and edge order.
fn permuted(g: &EvidenceGraph, rng: &mut ChaCha8Rng) -> EvidenceGraph {
    let mut ids: Vec<u64> = (0..g.nodes.len() as u64).map(|i| 1000 + i).collect();
    ids.shuffle(rng);
    let index: HashMap<u64, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let mut h = g.map_ids(|id| ids[index[&id]]);
    h.nodes.shuffle(rng);
    h.edges.shuffle(rng);
    h
}

/// WL features with labels kept as full strings instead of compressed ids.
fn oracle_features(g: &EvidenceGraph, iterations: usize) -> Vec<BTreeMap<String, u64>> {
    let pos: HashMap<u64, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for (s, d) in &g.edges {
        if let (Some(&s), Some(&d)) = (pos.get(s), pos.get(d)) {
            adj[s].push(d);
            adj[d].push(s);
        }
    }
    let mut labels: Vec<String> = g.nodes.iter().map(|n| n.label.clone()).collect();
    let mut out = Vec::new();
    for it in 0..=iterations {
        if it > 0 {
            labels = (0..labels.len())
                .map(|v| {
                    let mut neigh: Vec<&str> = adj[v].iter().map(|&u| labels[u].as_str()).collect();
                    neigh.sort();
                    format!("({}|{})", labels[v], neigh.join(","))
                })
                .collect();
        }
        let mut counts = BTreeMap::new();
        for l in &labels {
            *counts.entry(l.clone()).or_insert(0u64) += 1;
        }
        out.push(counts);
    }
    out
}

fn oracle_kernel(a: &EvidenceGraph, b: &EvidenceGraph, iterations: usize) -> u64 {
    let fa = oracle_features(a, iterations);
    let fb = oracle_features(b, iterations);
    fa.iter()
        .zip(&fb)
        .map(|(x, y)| x.iter().map(|(k, v)| v * y.get(k).copied().unwrap_or(0)).sum::<u64>())
        .sum()
}

fn hand_graph(labels: &[&str], edges: &[(u64, u64)]) -> EvidenceGraph {
    let mut g = EvidenceGraph::new(GraphKind::CallGraph);
    for l in labels {
        g.add_node(*l);
    }
    for &(s, d) in edges {
        g.add_edge(s, d);
    }
    g
}

fn hand_fixtures() -> Vec<EvidenceGraph> {
    vec![
        hand_graph(&["a"], &[]),
        hand_graph(&["a", "a"], &[(0, 1)]),
        hand_graph(&["a", "b", "a"], &[(0, 1), (1, 2)]),
        hand_graph(&["a", "a", "a"], &[(0, 1), (1, 2), (2, 0)]),
        hand_graph(&["main", "f", "g", "h"], &[(0, 1), (0, 2), (0, 3)]),
        hand_graph(&["a", "b", "a", "b"], &[(0, 1), (1, 2), (2, 3), (3, 0)]),
        hand_graph(&["a", "b"], &[(0, 0), (0, 1)]),
        hand_graph(&["main", "f", "g", "f"], &[(0, 1), (1, 2), (2, 3)]),
        hand_graph(&["x", "y", "z", "x", "y"], &[(0, 1), (1, 2), (3, 4), (4, 9)]),
        hand_graph(&["main", "malloc", "omp", "malloc", "main"], &[(0, 1), (0, 2), (4, 3), (4, 2)]),
    ]
}

#[test]
fn criterion_04_wl_kernel_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let start = Instant::now();
    let graphs: Vec<EvidenceGraph> = (0..200).map(|_| random_graph(&mut rng)).collect();
    let mut failures = Vec::new();

    for (i, g) in graphs.iter().enumerate() {
        let h = &graphs[(i + 1) % graphs.len()];
        if wl_kernel(g, h, WL_ITERATIONS).unwrap() != wl_kernel(h, g, WL_ITERATIONS).unwrap() {
            failures.push(format!("asymmetric pair {i}"));
        }
        let self_sim: f64 = normalized_similarity(g, g, WL_ITERATIONS).unwrap();
        if (self_sim - 1.0).abs() > 1e-12 {
            failures.push(format!("self similarity {self_sim} for graph {i}"));
        }
        let p = permuted(g, &mut rng);
        if wl_relabel(&p, WL_ITERATIONS) != wl_relabel(g, WL_ITERATIONS)
            || wl_kernel(&p, h, WL_ITERATIONS).unwrap() != wl_kernel(g, h, WL_ITERATIONS).unwrap()
        {
            failures.push(format!("permutation changed graph {i}"));
        }
    }

    let mut min_eig = f64::INFINITY;
    for chunk in graphs.chunks(20) {
        let refs: Vec<&EvidenceGraph> = chunk.iter().collect();
        for gram in [GramMatrix::<f64>::kernel(&refs, WL_ITERATIONS).unwrap(), GramMatrix::<f64>::normalized(&refs, WL_ITERATIONS).unwrap()] {
            let n = gram.size();
            let flat: Vec<f64> = gram.rows().concat();
            let m = nalgebra::DMatrix::from_row_slice(n, n, &flat);
            // scale so the tolerance is relative to the largest entry
            let scale = flat.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
            let e = (m / scale).symmetric_eigenvalues().min();
            min_eig = min_eig.min(e);
        }
    }
    if min_eig < -1e-9 {
        failures.push(format!("min eigenvalue {min_eig}"));
    }

    let fixtures = hand_fixtures();
    let mut oracle_checks = 0;
    for a in &fixtures {
        for b in &fixtures {
            oracle_checks += 1;
            let got = wl_kernel(a, b, WL_ITERATIONS).unwrap();
            let want = oracle_kernel(a, b, WL_ITERATIONS);
            if got != want {
                failures.push(format!("kernel {got} != oracle {want}"));
            }
        }
    }
    report(
        4,
        failures.is_empty(),
        start.elapsed(),
        Some(Duration::from_secs(30)),
        &format!(
            "200 graphs, min scaled Gram eigenvalue {min_eig:.3e}, {oracle_checks} oracle pairs, failures: {}",
            if failures.is_empty() { "none".to_string() } else { failures.join("; ") }
        ),
    );
}

fn memory_only_profile(true_mem: f64) -> WorkloadProfile {
    WorkloadProfile {
        true_mem_hwm_gb: true_mem,
        required_isa: IsaSet::new(),
        disk_gb: 1.0,
        ..cg_profile()
    }
}

/// What the recovery policy should do, walked by hand.
#[derive(Debug, PartialEq)]
enum Expected {
    Run(usize, RunStatus),
    Skip(usize),
}

fn oracle_recovery(prefs: &[InstancePreference], true_mem: f64, down: &BTreeSet<String>) -> (Vec<Expected>, bool) {
    let mut floor = 0.0;
    let mut steps = Vec::new();
    for p in prefs {
        let m = p.offer.memory_gb;
        if m < floor {
            steps.push(Expected::Skip(p.rank));
        } else if down.contains(&p.offer.name) {
            steps.push(Expected::Run(p.rank, RunStatus::FailProvisionUnavailable));
        } else if m >= true_mem + 2.0 {
            steps.push(Expected::Run(p.rank, RunStatus::Success));
            return (steps, true);
        } else {
            steps.push(Expected::Run(p.rank, RunStatus::FailOom));
            floor = f64::max(floor, 2.0 * m);
        }
    }
    (steps, false)
}

#[test]
fn criterion_05_recovery_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let start = Instant::now();
    let mut violations = Vec::new();
    let mut exhausted_runs = 0;
    for trial in 0..1000 {
        let n = rng.gen_range(1..=12);
        let prefs: Vec<InstancePreference> = (0..n)
            .map(|i| {
                let mem = *[2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0, 128.0, 256.0].choose(&mut rng).unwrap();
                let o = offer(&format!("t{i}"), mem, 8);
                InstancePreference {
                    rank: i + 1,
                    score: o.price_per_hour_usd,
                    offer: o,
                    rationale: String::new(),
                }
            })
            .collect();
        let mut availability = Availability::all_available();
        let mut down = BTreeSet::new();
        for p in &prefs {
            if rng.gen_bool(0.2) {
                availability.set(&p.offer, false);
                down.insert(p.offer.name.clone());
            }
        }
        let true_mem = rng.gen_range(0.5..120.0);
        let result = execute_with_recovery(&prefs, &memory_only_profile(true_mem), &availability);
        let (report, succeeded) = match result {
            Ok(r) => (r, true),
            Err(ExecutorError::AllCandidatesExhausted(r)) => (*r, false),
            Err(e) => panic!("{e}"),
        };
        if !succeeded {
            exhausted_runs += 1;
        }

        // every attempt after an OOM has at least twice the memory of each OOM so far
        let mut largest_oom: f64 = 0.0;
        for a in &report.attempts {
            if a.offer.memory_gb < 2.0 * largest_oom {
                violations.push(format!("trial {trial}: rank {} below 2x {largest_oom}", a.rank));
            }
            if down.contains(&a.offer.name) && a.outcome.status != RunStatus::FailProvisionUnavailable {
                violations.push(format!("trial {trial}: unavailable rank {} ran", a.rank));
            }
            if a.outcome.status == RunStatus::FailOom {
                largest_oom = largest_oom.max(a.offer.memory_gb);
            }
        }

        let (want, want_success) = oracle_recovery(&prefs, true_mem, &down);
        let mut got: Vec<Expected> = report
            .attempts
            .iter()
            .map(|a| Expected::Run(a.rank, a.outcome.status))
            .chain(report.skips.iter().map(|s| Expected::Skip(s.rank)))
            .collect();
        got.sort_by_key(|e| match e {
            Expected::Run(r, _) | Expected::Skip(r) => *r,
        });
        if got != want || succeeded != want_success {
            violations.push(format!("trial {trial}: {got:?} vs oracle {want:?}"));
        }
    }
    report(
        5,
        violations.is_empty(),
        start.elapsed(),
        Some(Duration::from_secs(5)),
        &format!(
            "1000 trials ({exhausted_runs} exhausted), {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    );
}

/// The CG listing and image with every OpenMP trace removed.
fn write_serial_fixture(dir: &std::path::Path) {
    let elf = ElfImage::new(62)
        .needed("libc.so.6")
        .symbol("main", true)
        .symbol("alloc_space", true)
        .symbol("conj_grad", true)
        .symbol("malloc", false)
        .build();
    std::fs::write(dir.join("cg.D.x"), elf).unwrap();
    let listing: String = cg_listing()
        .lines()
        .filter(|l| !l.contains("omp_") && !l.contains("GOMP_"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(dir.join("cg.D.x.dis"), listing).unwrap();
}

#[test]
fn criterion_06_adversarial_thread_count() {
    let start = Instant::now();
    let catalog = load_catalog(&fixture_path("catalog/synthetic-794.csv")).unwrap();
    let run = |dir: &std::path::Path| {
        let sub = SubmissionOptions {
            workdir: Some(dir.to_path_buf()),
            ..SubmissionOptions::default()
        };
        let job = normalize_submission("OMP_NUM_THREADS=1024 ./cg.D.x", &sub).unwrap();
        run_pipeline(&job, &catalog, Vec::new(), &mut RuleBasedReasoner, &opts()).unwrap().bundle.cpu_count
    };

    let serial = tempfile::tempdir().unwrap();
    write_serial_fixture(serial.path());
    let without = run(serial.path());
    let omp = tempfile::tempdir().unwrap();
    write_cg_fixture(omp.path()).unwrap();
    let with = run(omp.path());

    let pass = without.value == 1
        && without.confidence == Confidence::Low
        && with.value == 1024
        && with.confidence == Confidence::High;
    report(
        6,
        pass,
        start.elapsed(),
        None,
        &format!(
            "without OpenMP: {} ({}); with OpenMP: {} ({})",
            without.value, without.confidence, with.value, with.confidence
        ),
    );
}

/// Never finishes: asks for a fresh calculation forever.
struct Stubborn(u32);

impl Reasoner for Stubborn {
    fn name(&self) -> &str {
        "stubborn"
    }
    fn next_action(&mut self, _: &StepContext<'_>) -> Action {
        self.0 += 1;
        Action::Call(ToolCall::new("calculator", json!({"expression": format!("{} * 2", self.0)})))
    }
}

struct Probe(Arc<AtomicU32>);

impl Tool for Probe {
    fn name(&self) -> &str {
        "detect_accel_io"
    }
    fn description(&self) -> &str {
        "counts its own executions"
    }
    fn call(&self, _: &BTreeMap<String, Value>) -> Result<Value, String> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok(json!({}))
    }
}

/// Issues the same call, with differently spelled paths, in every subtask.
struct Repeater;

impl Reasoner for Repeater {
    fn name(&self) -> &str {
        "repeater"
    }
    fn next_action(&mut self, ctx: &StepContext<'_>) -> Action {
        let spelling = ["bin/x", "./bin/x", "bin/../bin/x"];
        match spelling.get(ctx.observations.len()) {
            Some(p) => Action::Call(ToolCall::new("detect_accel_io", json!({"path": p}))),
            None => Action::Finish {
                findings: Default::default(),
                structured: BTreeMap::new(),
                notes: Vec::new(),
            },
        }
    }
}

#[test]
fn criterion_07_termination_and_caching() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    write_cg_fixture(dir.path()).unwrap();
    let job = cg_job(dir.path(), SubmissionOptions::default());
    let catalog = load_catalog(&fixture_path("catalog/synthetic-794.csv")).unwrap();

    let mut stubborn = Stubborn(0);
    let out = run_pipeline(&job, &catalog, Vec::new(), &mut stubborn, &opts()).unwrap();
    let cfg = AgentConfig::constraint_estimation();
    let stage = out.constraint_stage.unwrap();
    let cut_off = stage.findings.iter().all(|f| f.budget_exhausted)
        && stage.tool_calls <= cfg.budgets.max_total_tool_calls
        && stage
            .findings
            .iter()
            .all(|f| f.tool_calls <= cfg.budgets.max_iterations_per_subtask);

    let count = Arc::new(AtomicU32::new(0));
    let options = PipelineOptions {
        extra_tools: vec![Arc::new(Probe(Arc::clone(&count)))],
        ..opts()
    };
    let out = run_pipeline(&job, &catalog, Vec::new(), &mut Repeater, &options).unwrap();
    let executions = count.load(Ordering::SeqCst);
    let pass = cut_off && executions == 1 && out.stats.tool_calls > 3;
    report(
        7,
        pass,
        start.elapsed(),
        None,
        &format!(
            "non-terminating reasoner stopped after {} calls (budget {}); {} duplicate requests, {executions} execution",
            stage.tool_calls, cfg.budgets.max_total_tool_calls, out.stats.tool_calls
        ),
    );
}

#[test]
fn criterion_08_second_run_tightening() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    write_cg_fixture(dir.path().join("job").as_path()).unwrap();
    let store = Store::open(dir.path().join("store")).unwrap();
    let catalog = load_catalog(&fixture_path("catalog/synthetic-794.csv")).unwrap();
    // the real heap is smaller than the static estimate of 16 GB
    let profile = WorkloadProfile {
        true_mem_hwm_gb: 11.0,
        ..cg_profile()
    };

    let first = cg_job(&dir.path().join("job"), SubmissionOptions::default());
    let out = run_pipeline(&first, &catalog, Vec::new(), &mut RuleBasedReasoner, &opts()).unwrap();
    let recovery = execute_with_recovery(&out.preferences, &profile, &Availability::all_available()).unwrap();
    let (exec, inv) = job_graphs(&first);
    let record = JobRecord::from_run(&first, &out.bundle, &out.preferences, &recovery, exec, inv, "logs".into(), Vec::new());
    store.persist(&record).unwrap();
    let peak = parse_peak_memory(&record.metrics_summary).unwrap();

    let mut second = cg_job(&dir.path().join("job"), SubmissionOptions::default());
    if second.job_id == first.job_id {
        second.job_id = format!("{}-2", first.job_id).parse().unwrap();
    }
    let history = history_evidence_for(&store, &second, &SimilarityParams::default()).unwrap();
    let out2 = run_pipeline(&second, &catalog, history, &mut RuleBasedReasoner, &opts()).unwrap();
    let est = out2.bundle.mem_hwm_gb.value;
    let pass = est >= peak && est <= 1.25 * peak;
    report(
        8,
        pass,
        start.elapsed(),
        Some(Duration::from_secs(5)),
        &format!(
            "first estimate {} GB, measured peak {peak} GB, second estimate {est} GB (bounds [{peak}, {}])",
            out.bundle.mem_hwm_gb.value,
            1.25 * peak
        ),
    );
}

#[test]
fn criterion_09_selector_cost_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let start = Instant::now();
    let catalog = load_catalog(&fixture_path("catalog/synthetic-794.csv")).unwrap();
    let bound = PenaltyConfig::default().max_product();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut violations = Vec::new();
    while checked < 200 {
        let mut b = random_bundle(&mut rng);
        // the synthetic catalog is x86_64 only
        b.platform.value = *[Platform::X86_64, Platform::Any].choose(&mut rng).unwrap();
        b.isa_features.value = close_isa(&b.isa_features.value);
        let feasible = filter_feasible(&catalog, &b);
        if feasible.is_empty() {
            continue;
        }
        checked += 1;
        let top = &rank_instances(&feasible, &b).unwrap()[0];
        // under low memory confidence the exact-fit size is deliberately
        // passed over for the next size up, so the baseline is drawn from there
        let mut sizes: Vec<f64> = feasible.iter().map(|o| o.memory_gb).collect();
        sizes.sort_by(f64::total_cmp);
        sizes.dedup();
        let pool_floor = match (b.mem_hwm_gb.confidence, sizes.get(1)) {
            (Confidence::Low, Some(&next)) => next,
            _ => sizes[0],
        };
        let cheapest = feasible
            .iter()
            .filter(|o| o.memory_gb >= pool_floor)
            .map(|o| o.price_per_hour_usd)
            .fold(f64::INFINITY, f64::min);
        let ratio = top.offer.price_per_hour_usd / cheapest;
        worst = worst.max(ratio);
        if ratio > bound + 1e-12 {
            violations.push(format!("{} at {ratio:.3}x", top.offer.name));
        }
    }
    report(
        9,
        violations.is_empty(),
        start.elapsed(),
        None,
        &format!("200 random bundles, worst top/cheapest price ratio {worst:.3} against a bound of {bound:.3}"),
    );
}

fn canonical(r: &JobRecord) -> String {
    // Value maps are ordered, so this fixes key order
    serde_json::to_value(r).unwrap().to_string()
}

#[test]
fn criterion_10_record_durability() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let mut mismatches = 0;
    for i in 0..100 {
        let rec = sample_record(i);
        store.persist(&rec).unwrap();
        let back = store.load(rec.job_id.as_str()).unwrap();
        if canonical(&back) != canonical(&rec) || back != rec {
            mismatches += 1;
        }
    }

    let crashed = sample_record(100);
    let id = crashed.job_id.to_string();
    let tmp = store.stage(&crashed).unwrap().abandon();
    let leftover = tmp.exists();
    let invisible = matches!(store.load(&id), Err(RecordsError::NotFound(_)))
        && store.list_history(None).unwrap().len() == 100
        && store.load_all().unwrap().len() == 100;
    // the same job can still be written after the crash
    store.persist(&crashed).unwrap();
    let recovered = store.load(&id).unwrap() == crashed && store.list_history(None).unwrap().len() == 101;

    let pass = mismatches == 0 && leftover && invisible && recovered;
    report(
        10,
        pass,
        start.elapsed(),
        Some(Duration::from_secs(5)),
        &format!(
            "100 round trips, {mismatches} mismatches; crash before rename left the store {}",
            if invisible && recovered { "consistent" } else { "inconsistent" }
        ),
    );
}
