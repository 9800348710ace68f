//! Fixture builders shared by unit tests, integration tests and the CLI
//! tests: synthetic ELF images, the CG reference bundle, the synthetic
//! catalog generator and workload profiles.

use crate::analysis::elf::ElfClass;
use crate::catalog::{Accelerator, Architecture, Catalog, CpuVendor, InstanceOffer};
use crate::executor::{execute_with_recovery, Availability, WorkloadProfile};
use crate::records::JobRecord;
use crate::similarity::{build_invocation_graph, EvidenceGraph, GraphKind};
use crate::submission::{normalize_submission, InvocationContext, JobId, JobSpec, SubmissionOptions, WorkloadKind};
use crate::selector::InstancePreference;
use crate::constraints::{
    BundleSchema, Confidence, ConstraintBundle, ConstraintEstimate, IoIntensity, IsaFeature, IsaSet, Platform,
};

/// Builds a minimal ELF image field by field: header, `.text`, `.dynstr`,
/// `.dynsym`, `.dynamic` and `.shstrtab`.
#[derive(Debug, Clone)]
pub struct ElfImage {
    machine: u16,
    class: ElfClass,
    big_endian: bool,
    needed: Vec<String>,
    symbols: Vec<(String, bool)>,
}

struct Out {
    buf: Vec<u8>,
    big_endian: bool,
}

impl Out {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        let b = if self.big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
        self.buf.extend_from_slice(&b);
    }
    fn u32(&mut self, v: u32) {
        let b = if self.big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
        self.buf.extend_from_slice(&b);
    }
    fn u64(&mut self, v: u64) {
        let b = if self.big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
        self.buf.extend_from_slice(&b);
    }
    fn word(&mut self, class: ElfClass, v: u64) {
        match class {
            ElfClass::Elf32 => self.u32(v as u32),
            ElfClass::Elf64 => self.u64(v),
        }
    }
    fn pad_to(&mut self, align: usize) {
        while self.buf.len() % align != 0 {
            self.buf.push(0);
        }
    }
}

struct StrTab(Vec<u8>);

impl StrTab {
    fn new() -> Self {
        StrTab(vec![0])
    }
    fn add(&mut self, s: &str) -> u32 {
        let off = self.0.len() as u32;
        self.0.extend_from_slice(s.as_bytes());
        self.0.push(0);
        off
    }
}

impl ElfImage {
    pub fn new(machine: u16) -> Self {
        ElfImage {
            machine,
            class: ElfClass::Elf64,
            big_endian: false,
            needed: Vec::new(),
            symbols: Vec::new(),
        }
    }

    pub fn class(mut self, class: ElfClass) -> Self {
        self.class = class;
        self
    }

    pub fn big_endian(mut self, big_endian: bool) -> Self {
        self.big_endian = big_endian;
        self
    }

    pub fn needed(mut self, lib: &str) -> Self {
        self.needed.push(lib.to_string());
        self
    }

    pub fn symbol(mut self, name: &str, defined: bool) -> Self {
        self.symbols.push((name.to_string(), defined));
        self
    }

    pub fn build(&self) -> Vec<u8> {
        let class = self.class;
        let (ehsize, shentsize, symsize, dynsize) = match class {
            ElfClass::Elf32 => (52usize, 40u16, 16usize, 8usize),
            ElfClass::Elf64 => (64, 64, 24, 16),
        };

        let mut dynstr = StrTab::new();
        let needed: Vec<u32> = self.needed.iter().map(|n| dynstr.add(n)).collect();
        let syms: Vec<(u32, bool)> = self.symbols.iter().map(|(n, d)| (dynstr.add(n), *d)).collect();

        let mut shstr = StrTab::new();
        let names = [".text", ".dynstr", ".dynsym", ".dynamic", ".shstrtab"].map(|n| shstr.add(n));

        let mut o = Out {
            buf: vec![0; ehsize],
            big_endian: self.big_endian,
        };
        let text_off = o.buf.len();
        o.buf.extend_from_slice(&[0x90, 0x90, 0xc3, 0x00]);
        let dynstr_off = o.buf.len();
        o.buf.extend_from_slice(&dynstr.0);
        o.pad_to(8);

        let dynsym_off = o.buf.len();
        o.buf.extend(std::iter::repeat(0).take(symsize));
        for (name, defined) in &syms {
            let shndx: u16 = if *defined { 1 } else { 0 };
            match class {
                ElfClass::Elf64 => {
                    o.u32(*name);
                    o.u8(0x12);
                    o.u8(0);
                    o.u16(shndx);
                    o.u64(if *defined { 0x1000 } else { 0 });
                    o.u64(0);
                }
                ElfClass::Elf32 => {
                    o.u32(*name);
                    o.u32(if *defined { 0x1000 } else { 0 });
                    o.u32(0);
                    o.u8(0x12);
                    o.u8(0);
                    o.u16(shndx);
                }
            }
        }
        let dynsym_size = o.buf.len() - dynsym_off;

        let dynamic_off = o.buf.len();
        for off in &needed {
            o.word(class, 1);
            o.word(class, u64::from(*off));
        }
        o.word(class, 0);
        o.word(class, 0);
        let dynamic_size = o.buf.len() - dynamic_off;

        let shstr_off = o.buf.len();
        o.buf.extend_from_slice(&shstr.0);
        o.pad_to(8);

        // (name, type, offset, size, link, entsize)
        let sections: [(u32, u32, usize, usize, u32, usize); 6] = [
            (0, 0, 0, 0, 0, 0),
            (names[0], 1, text_off, 4, 0, 0),
            (names[1], 3, dynstr_off, dynstr.0.len(), 0, 0),
            (names[2], 11, dynsym_off, dynsym_size, 2, symsize),
            (names[3], 6, dynamic_off, dynamic_size, 2, dynsize),
            (names[4], 3, shstr_off, shstr.0.len(), 0, 0),
        ];
        let shoff = o.buf.len();
        for (name, kind, offset, size, link, entsize) in sections {
            match class {
                ElfClass::Elf64 => {
                    o.u32(name);
                    o.u32(kind);
                    o.u64(0);
                    o.u64(0);
                    o.u64(offset as u64);
                    o.u64(size as u64);
                    o.u32(link);
                    o.u32(0);
                    o.u64(8);
                    o.u64(entsize as u64);
                }
                ElfClass::Elf32 => {
                    o.u32(name);
                    o.u32(kind);
                    o.u32(0);
                    o.u32(0);
                    o.u32(offset as u32);
                    o.u32(size as u32);
                    o.u32(link);
                    o.u32(0);
                    o.u32(4);
                    o.u32(entsize as u32);
                }
            }
        }

        let body = std::mem::take(&mut o.buf);
        let mut h = Out {
            buf: Vec::with_capacity(ehsize),
            big_endian: self.big_endian,
        };
        h.buf.extend_from_slice(&[0x7f, b'E', b'L', b'F']);
        h.u8(match class {
            ElfClass::Elf32 => 1,
            ElfClass::Elf64 => 2,
        });
        h.u8(if self.big_endian { 2 } else { 1 });
        h.u8(1);
        h.buf.extend_from_slice(&[0; 9]);
        h.u16(2); // ET_EXEC
        h.u16(self.machine);
        h.u32(1);
        h.word(class, 0x1000);
        h.word(class, 0);
        h.word(class, shoff as u64);
        h.u32(0);
        h.u16(ehsize as u16);
        h.u16(0);
        h.u16(0);
        h.u16(shentsize);
        h.u16(sections.len() as u16);
        h.u16(5);
        assert_eq!(h.buf.len(), ehsize);

        let mut image = h.buf;
        image.extend_from_slice(&body[ehsize..]);
        image
    }
}

/// The CG class D requirements: x86_64, 16 GB heap, 8 OpenMP threads,
/// AVX without AVX-512, no accelerator, minimal I/O.
pub fn cg_bundle() -> ConstraintBundle {
    let est = |why: &str| (Confidence::High, why.to_string());
    let mk = |v, (c, r): (Confidence, String)| ConstraintEstimate::new(v, c, r).with_refs(["fixture"]);
    ConstraintBundle {
        schema: BundleSchema,
        mem_hwm_gb: mk(16.0, est("allocation immediates in alloc_space sum to 16 GiB")),
        cpu_count: ConstraintEstimate::new(8, Confidence::High, "OMP_NUM_THREADS=8 with OpenMP markers")
            .with_refs(["fixture"]),
        platform: ConstraintEstimate::new(Platform::X86_64, Confidence::High, "ELF64 e_machine=62")
            .with_refs(["fixture"]),
        isa_features: ConstraintEstimate::new(IsaSet::from([IsaFeature::Avx]), Confidence::High, "ymm, no zmm")
            .with_refs(["fixture"]),
        gpu_required: ConstraintEstimate::new(false, Confidence::Medium, "no GPU markers").with_refs(["fixture"]),
        gpu_count: ConstraintEstimate::new(0, Confidence::Medium, "no GPU required").with_refs(["fixture"]),
        gpu_mem_gb: mk(0.0, (Confidence::Medium, "no GPU required".into())),
        io_intensity: ConstraintEstimate::new(IoIntensity::Minimal, Confidence::Medium, "no I/O markers")
            .with_refs(["fixture"]),
        disk_gb: ConstraintEstimate::new(8.0, Confidence::Low, "no disk evidence"),
    }
}

/// A plain x86_64 AMD offer used by unit tests.
pub fn offer(name: &str, memory_gb: f64, vcpus: u32) -> InstanceOffer {
    InstanceOffer {
        provider: "aws".into(),
        name: name.into(),
        architecture: Architecture::X86_64,
        vcpus,
        physical_cpus: Some((vcpus / 2).max(1)),
        memory_gb,
        accelerator: None,
        premium_storage: false,
        price_per_hour_usd: 0.01 * f64::from(vcpus) + 0.005 * memory_gb,
        cpu_vendor: CpuVendor::Amd,
        cpu_generation: 7,
        isa_features: IsaSet::from([IsaFeature::Avx, IsaFeature::Avx2]),
    }
}

/// Offers below, inside and above the right-sized band for a 16 GB heap.
pub const SYNTHETIC_TIER_COUNTS: [usize; 3] = [85, 79, 630];
const SYNTHETIC_TIER_MEMORY: [&[f64]; 3] = [
    &[0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
    &[24.0, 30.5, 21.0, 28.0],
    &[32.0, 48.0, 64.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0, 768.0, 1024.0, 1536.0, 2048.0],
];

/// Deterministic 794-offer x86_64 catalog: 85 offers under 18 GB (the
/// largest being exact 16 GB parts), 79 in [18, 32) and 630 at 32 GB or
/// more. Every offer supports AVX.
pub fn synthetic_catalog() -> Catalog {
    let mut offers = Vec::new();
    for (tier, (&count, sizes)) in SYNTHETIC_TIER_COUNTS.iter().zip(SYNTHETIC_TIER_MEMORY).enumerate() {
        let tag = ["lo", "md", "hi"][tier];
        for i in 0..count {
            let memory_gb = sizes[i % sizes.len()];
            let (family, ratio) = [("c", 2.0), ("m", 4.0), ("r", 8.0)][(i / sizes.len()) % 3];
            let vcpus = ((memory_gb / ratio).round() as u32).max(1);
            let vendor = if i % 2 == 0 { CpuVendor::Amd } else { CpuVendor::Intel };
            let generation = 5 + ((i / 2) % 4) as u32;
            let mut isa = IsaSet::from([IsaFeature::Avx]);
            if generation >= 6 {
                isa.insert(IsaFeature::Avx2);
            }
            if vendor == CpuVendor::Intel && generation >= 7 {
                isa.insert(IsaFeature::Avx512);
            }
            let premium_storage = i % 5 == 0;
            let accelerator = (tier == 2 && i % 21 == 0).then(|| Accelerator {
                kind: "nvidia-a10g".into(),
                count: 1,
                mem_gb_per_device: 24.0,
            });
            let mut price = 0.0425 * f64::from(vcpus) + 0.0053 * memory_gb;
            price *= 1.0 - 0.02 * f64::from(generation - 5);
            if vendor == CpuVendor::Intel {
                price *= 1.1;
            }
            if premium_storage {
                price *= 1.15;
            }
            if accelerator.is_some() {
                price += 1.0;
            }
            let vl = if vendor == CpuVendor::Amd { "a" } else { "i" };
            offers.push(InstanceOffer {
                provider: "aws".into(),
                name: format!("{family}{generation}{vl}.{tag}{i:03}"),
                architecture: Architecture::X86_64,
                vcpus,
                physical_cpus: Some((vcpus / 2).max(1)),
                memory_gb,
                accelerator,
                premium_storage,
                price_per_hour_usd: (price * 1e4).round() / 1e4,
                cpu_vendor: vendor,
                cpu_generation: generation,
                isa_features: isa,
            });
        }
    }
    Catalog::new(offers, "synthetic-794").expect("generated names are unique")
}

/// Ground truth for CG class D: 16 GB heap, 8 threads, AVX.
pub fn cg_profile() -> WorkloadProfile {
    WorkloadProfile {
        true_mem_hwm_gb: 16.0,
        true_cpu_parallelism: 8,
        needs_gpu: false,
        true_gpu_mem_gb: 0.0,
        required_isa: IsaSet::from([IsaFeature::Avx]),
        io_class: IoIntensity::Minimal,
        disk_gb: 10.0,
        base_runtime_s_at_reference: 600.0,
        imported_modules: None,
    }
}

/// Preferences over plain offers, ranked in the given order.
pub fn pref_list(items: &[(&str, f64)]) -> Vec<InstancePreference> {
    items
        .iter()
        .enumerate()
        .map(|(i, &(name, mem))| {
            let o = offer(name, mem, 16);
            InstancePreference {
                rank: i + 1,
                score: o.price_per_hour_usd,
                offer: o,
                rationale: "test".into(),
            }
        })
        .collect()
}

/// A complete CG record: OOM on 16 GB, success on 64 GB. `i` picks the
/// job id and shifts the timestamp by `i` seconds.
pub fn sample_record(i: u32) -> JobRecord {
    let job_id: JobId = format!("{:020}", 1_700_000_000_000_000u64 + u64::from(i)).parse().expect("valid id");
    let invocation = InvocationContext {
        command: "OMP_NUM_THREADS=8 ./cg.D.x".into(),
        args: vec!["./cg.D.x".into()],
        env: [("OMP_NUM_THREADS".to_string(), "8".to_string())].into(),
        wrapper_scripts: Vec::new(),
    };
    let spec = JobSpec {
        job_id,
        workload_kind: WorkloadKind::CompiledBinary,
        entry_path: "cg.D.x".into(),
        invocation: invocation.clone(),
        aux_artifacts: Vec::new(),
        user_overrides: None,
        history_refs: Vec::new(),
    };
    let prefs = pref_list(&[("m16", 16.0), ("m24", 24.0), ("m64", 64.0)]);
    let report = execute_with_recovery(&prefs, &cg_profile(), &Availability::all_available()).expect("m64 fits");
    let mut exec = EvidenceGraph::new(GraphKind::CallGraph);
    let main = exec.add_node("main");
    for callee in ["alloc_space", "conj_grad", "omp_get_num_threads"] {
        let c = exec.add_node(callee);
        exec.add_edge(main, c);
    }
    let mut rec = JobRecord::from_run(
        &spec,
        &cg_bundle(),
        &prefs,
        &report,
        exec,
        build_invocation_graph(&invocation),
        format!("jobs/{}/logs", spec.job_id).into(),
        vec!["sample".into()],
    );
    rec.created_at = chrono::DateTime::from_timestamp(1_760_000_000 + i64::from(i), 123_456_789).expect("in range");
    rec
}

/// ELF64 x86_64 image for the CG fixture: libgomp plus OpenMP and
/// allocator imports.
pub fn cg_elf() -> Vec<u8> {
    ElfImage::new(62)
        .needed("libgomp.so.1")
        .needed("libc.so.6")
        .symbol("main", true)
        .symbol("alloc_space", true)
        .symbol("conj_grad", true)
        .symbol("debug_dump", true)
        .symbol("malloc", false)
        .symbol("omp_get_num_threads", false)
        .symbol("GOMP_parallel", false)
        .build()
}

/// Heap allocations made by `alloc_space`, in call order. They sum to
/// exactly 16 GiB.
pub const CG_ALLOCATIONS: [u64; 6] = [0xfbc5200, 0xfc000000, 0xfc000000, 0xfc000000, 0xfc000000, 0x43ae00];

/// Allocation in the never-called `debug_dump`.
pub const CG_DEAD_ALLOCATION: u64 = 0x4000_0000;

fn dis_line(out: &mut String, addr: &mut u64, bytes: &str, insn: &str) {
    out.push_str(&format!("  {addr:x}:\t{bytes:<21}\t{insn}\n"));
    *addr += bytes.split_whitespace().count() as u64;
}

/// objdump-style AT&T listing for the CG fixture.
pub fn cg_listing() -> String {
    let mut out = String::from("\ncg.D.x:     file format elf64-x86-64\n\n\nDisassembly of section .text:\n\n");
    let mut addr = 0x401000u64;
    let call = |target: &str| format!("call   {target}");

    out.push_str(&format!("{addr:016x} <main>:\n"));
    dis_line(&mut out, &mut addr, "55", "push   %rbp");
    dis_line(&mut out, &mut addr, "48 89 e5", "mov    %rsp,%rbp");
    dis_line(&mut out, &mut addr, "e8 f5 00 00 00", &call("401100 <alloc_space>"));
    dis_line(&mut out, &mut addr, "e8 f0 01 00 00", &call("401200 <conj_grad>"));
    dis_line(&mut out, &mut addr, "31 c0", "xor    %eax,%eax");
    dis_line(&mut out, &mut addr, "5d", "pop    %rbp");
    dis_line(&mut out, &mut addr, "c3", "ret");

    addr = 0x401100;
    out.push_str(&format!("\n{addr:016x} <alloc_space>:\n"));
    dis_line(&mut out, &mut addr, "53", "push   %rbx");
    for bytes in CG_ALLOCATIONS {
        let le = (bytes as u32).to_le_bytes();
        let enc = format!("bf {:02x} {:02x} {:02x} {:02x}", le[0], le[1], le[2], le[3]);
        dis_line(&mut out, &mut addr, &enc, &format!("mov    $0x{bytes:x},%edi"));
        dis_line(&mut out, &mut addr, "e8 00 00 00 00", &call("401030 <malloc@plt>"));
        dis_line(&mut out, &mut addr, "48 89 c3", "mov    %rax,%rbx");
    }
    dis_line(&mut out, &mut addr, "5b", "pop    %rbx");
    dis_line(&mut out, &mut addr, "c3", "ret");

    addr = 0x401200;
    out.push_str(&format!("\n{addr:016x} <conj_grad>:\n"));
    dis_line(&mut out, &mut addr, "e8 00 00 00 00", &call("401040 <omp_get_num_threads@plt>"));
    dis_line(&mut out, &mut addr, "e8 00 00 00 00", &call("401050 <GOMP_parallel@plt>"));
    dis_line(&mut out, &mut addr, "c5 fd 10 06", "vmovupd (%rsi),%ymm0");
    dis_line(&mut out, &mut addr, "c5 fd 59 0a", "vmulpd (%rdx),%ymm0,%ymm1");
    dis_line(&mut out, &mut addr, "c5 f5 58 d2", "vaddpd %ymm2,%ymm1,%ymm2");
    dis_line(&mut out, &mut addr, "c5 fd 11 17", "vmovupd %ymm2,(%rdi)");
    dis_line(&mut out, &mut addr, "c5 f8 77", "vzeroupper");
    dis_line(&mut out, &mut addr, "c3", "ret");

    addr = 0x401300;
    out.push_str(&format!("\n{addr:016x} <debug_dump>:\n"));
    dis_line(&mut out, &mut addr, "bf 00 00 00 40", &format!("mov    $0x{CG_DEAD_ALLOCATION:x},%edi"));
    dis_line(&mut out, &mut addr, "e8 00 00 00 00", &call("401030 <malloc@plt>"));
    dis_line(&mut out, &mut addr, "c3", "ret");
    out
}

/// Call graph evidence for the CG fixture. `debug_dump` has no caller.
pub fn cg_call_graph() -> EvidenceGraph {
    let mut g = EvidenceGraph::new(GraphKind::CallGraph);
    let ids: Vec<u64> = ["main", "alloc_space", "conj_grad", "malloc", "omp_get_num_threads", "GOMP_parallel", "debug_dump"]
        .into_iter()
        .map(|l| g.add_node(l))
        .collect();
    for (s, d) in [(0, 1), (0, 2), (1, 3), (2, 4), (2, 5), (6, 3)] {
        g.add_edge(ids[s], ids[d]);
    }
    g
}

/// Writes `cg.D.x`, `cg.D.x.dis` and `cg.D.x.cfg.json` into `dir`.
pub fn write_cg_fixture(dir: &std::path::Path) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let entry = dir.join("cg.D.x");
    std::fs::write(&entry, cg_elf())?;
    std::fs::write(dir.join("cg.D.x.dis"), cg_listing())?;
    let graph = serde_json::to_string_pretty(&cg_call_graph()).expect("graph serializes");
    std::fs::write(dir.join("cg.D.x.cfg.json"), graph + "\n")?;
    Ok(entry)
}

/// Submits the CG fixture found in `dir` as `OMP_NUM_THREADS=8 ./cg.D.x`.
pub fn cg_job(dir: &std::path::Path, extra: SubmissionOptions) -> JobSpec {
    let opts = SubmissionOptions {
        workdir: Some(dir.to_path_buf()),
        ..extra
    };
    normalize_submission("OMP_NUM_THREADS=8 ./cg.D.x", &opts).expect("fixture submits")
}

/// A small interpreted job: `analyze.py` importing pandas and a local
/// module that pulls in h5py.
pub fn write_python_fixture(dir: &std::path::Path) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir.join("lib"))?;
    let entry = dir.join("analyze.py");
    std::fs::write(
        &entry,
        "#!/usr/bin/env python3\nimport sys\n\nimport pandas as pd\n\nfrom lib import loader\n\n\ndef main():\n    frame = pd.DataFrame(loader.load(sys.argv[1]))\n    print(frame.describe())\n\n\nif __name__ == \"__main__\":\n    main()\n",
    )?;
    std::fs::write(dir.join("lib/__init__.py"), "")?;
    std::fs::write(
        dir.join("lib/loader.py"),
        "import h5py\n\n\ndef load(path):\n    with h5py.File(path) as f:\n        return {k: f[k][()] for k in f}\n",
    )?;
    Ok(entry)
}

/// Every profile shipped under `fixtures/profiles`.
pub fn shipped_profiles() -> Vec<(&'static str, WorkloadProfile)> {
    let mut gpu = cg_profile();
    gpu.true_mem_hwm_gb = 40.0;
    gpu.true_cpu_parallelism = 8;
    gpu.needs_gpu = true;
    gpu.true_gpu_mem_gb = 20.0;
    gpu.required_isa = IsaSet::from([IsaFeature::Avx, IsaFeature::Avx2]);
    gpu.io_class = IoIntensity::Moderate;
    gpu.disk_gb = 50.0;
    gpu.base_runtime_s_at_reference = 1800.0;

    let mut small = cg_profile();
    small.true_mem_hwm_gb = 3.0;
    small.true_cpu_parallelism = 1;
    small.required_isa = IsaSet::new();
    small.disk_gb = 2.0;
    small.base_runtime_s_at_reference = 120.0;
    small.imported_modules = Some(["pandas".to_string(), "h5py".to_string()].into());

    vec![("cg-d", cg_profile()), ("gpu-train", gpu), ("py-analyze", small)]
}

/// Workspace-relative fixture path.
pub fn fixture_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_fixture_matches_generator() {
        let path = fixture_path("catalog/synthetic-794.csv");
        let expected = synthetic_catalog().to_csv();
        if std::env::var_os("INCISOR_REGENERATE_FIXTURES").is_some() {
            std::fs::write(&path, &expected).unwrap();
        }
        assert_eq!(std::fs::read_to_string(&path).unwrap(), expected);
    }

    fn check_or_regenerate(rel: &str, expected: &[u8]) {
        let path = fixture_path(rel);
        if std::env::var_os("INCISOR_REGENERATE_FIXTURES").is_some() {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, expected).unwrap();
        }
        assert_eq!(std::fs::read(&path).unwrap(), expected, "{rel} is stale");
    }

    #[test]
    fn shipped_fixtures_match_generators() {
        let tmp = tempfile::tempdir().unwrap();
        write_cg_fixture(tmp.path()).unwrap();
        for name in ["cg.D.x", "cg.D.x.dis", "cg.D.x.cfg.json"] {
            check_or_regenerate(&format!("cg/{name}"), &std::fs::read(tmp.path().join(name)).unwrap());
        }
        let tmp = tempfile::tempdir().unwrap();
        write_python_fixture(tmp.path()).unwrap();
        for name in ["analyze.py", "lib/__init__.py", "lib/loader.py"] {
            check_or_regenerate(&format!("python/{name}"), &std::fs::read(tmp.path().join(name)).unwrap());
        }
        for (name, profile) in shipped_profiles() {
            let text = serde_json::to_string_pretty(&profile).unwrap() + "\n";
            check_or_regenerate(&format!("profiles/{name}.json"), text.as_bytes());
        }
    }

    #[test]
    fn cg_allocations_sum_to_16_gib() {
        assert_eq!(CG_ALLOCATIONS.iter().sum::<u64>(), 16 << 30);
        assert_eq!(CG_ALLOCATIONS[0], 264_000_000);
    }
}
