//! Disassembly listings in objdump text form, and the scans run over them:
//! ISA feature detection and allocation-size recovery.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::constraints::{close_isa, IsaFeature, IsaSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: String,
    pub bytes: String,
    pub mnemonic: String,
    pub operands: String,
}

impl Instruction {
    /// Symbol named in a `<target>` operand, without `@plt`/version suffixes
    /// or `+0x..` offsets.
    pub fn target_symbol(&self) -> Option<&str> {
        let start = self.operands.find('<')? + 1;
        let end = start + self.operands[start..].find('>')?;
        let raw = &self.operands[start..end];
        let raw = raw.split('+').next().unwrap_or(raw);
        Some(raw.split('@').next().unwrap_or(raw))
    }

    pub fn is_call(&self) -> bool {
        matches!(self.mnemonic.as_str(), "call" | "callq" | "calll" | "bl" | "blr")
    }

    fn is_tail_jump(&self) -> bool {
        matches!(self.mnemonic.as_str(), "jmp" | "jmpq" | "b")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisassemblyListing {
    pub lines: Vec<Instruction>,
    /// Symbol name to `[start, end)` line indices.
    pub symbol_spans: BTreeMap<String, (usize, usize)>,
}

const PREFIXES: &[&str] = &[
    "lock", "rep", "repz", "repe", "repnz", "repne", "bnd", "notrack", "data16", "addr32", "cs", "ds", "es", "ss",
    "fs", "gs", "rex", "rex.w", "xacquire", "xrelease",
];

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([0-9a-fA-F]+) <(.+)>:\s*$").unwrap())
}

fn comment_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s+(#|//)\s.*$").unwrap())
}

impl DisassemblyListing {
    /// Parses `ADDR:\tBYTES\tMNEMONIC OPERANDS` lines under `ADDR <name>:`
    /// headers. Anything else (section banners, blank lines, byte
    /// continuation lines) is skipped.
    pub fn parse(text: &str) -> DisassemblyListing {
        let mut listing = DisassemblyListing::default();
        let mut current: Option<(String, usize)> = None;

        let close = |listing: &mut DisassemblyListing, current: &mut Option<(String, usize)>| {
            if let Some((name, start)) = current.take() {
                let end = listing.lines.len();
                let mut key = name.clone();
                let mut n = 2;
                while listing.symbol_spans.contains_key(&key) {
                    key = format!("{name}#{n}");
                    n += 1;
                }
                listing.symbol_spans.insert(key, (start, end));
            }
        };

        for raw in text.lines() {
            let line = raw.trim_end();
            if let Some(cap) = header_re().captures(line) {
                close(&mut listing, &mut current);
                current = Some((cap[2].to_string(), listing.lines.len()));
                continue;
            }
            let trimmed = line.trim_start();
            let Some(colon) = trimmed.find(':') else { continue };
            let address = &trimmed[..colon];
            if address.is_empty() || !address.chars().all(|c| c.is_ascii_hexdigit()) {
                continue;
            }
            let rest = &trimmed[colon + 1..];
            let fields: Vec<&str> = rest.split('\t').collect();
            // fields[0] is the empty string before the first tab
            let (bytes, text) = match fields.as_slice() {
                [_, bytes, mnemonic, operands, ..] => (bytes.trim(), format!("{mnemonic} {operands}")),
                [_, bytes, insn] => (bytes.trim(), insn.to_string()),
                _ => continue,
            };
            let text = comment_re().replace(&text, "");
            let mut tokens = text.split_whitespace().peekable();
            let mut mnemonic = None;
            while let Some(tok) = tokens.next() {
                let lower = tok.to_ascii_lowercase();
                if PREFIXES.contains(&lower.as_str()) && tokens.peek().is_some() {
                    continue;
                }
                mnemonic = Some(lower);
                break;
            }
            let Some(mnemonic) = mnemonic else { continue };
            if mnemonic == "(bad)" {
                continue;
            }
            let operands = tokens.collect::<Vec<_>>().join(" ");
            listing.lines.push(Instruction {
                address: address.to_string(),
                bytes: bytes.to_string(),
                mnemonic,
                operands,
            });
        }
        close(&mut listing, &mut current);
        listing
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Name of the symbol whose span contains line `idx`.
    pub fn symbol_at(&self, idx: usize) -> Option<&str> {
        self.symbol_spans
            .iter()
            .find(|(_, &(s, e))| s <= idx && idx < e)
            .map(|(name, _)| name.split('#').next().unwrap_or(name))
    }

    fn span_at(&self, idx: usize) -> Option<(usize, usize)> {
        self.symbol_spans.values().copied().find(|&(s, e)| s <= idx && idx < e)
    }

    /// Every symbol named by a call or jump target.
    pub fn referenced_symbols(&self) -> BTreeSet<String> {
        self.lines
            .iter()
            .filter_map(|i| i.target_symbol())
            .map(String::from)
            .collect()
    }
}

fn reg_re(class: &str) -> Regex {
    Regex::new(&format!(r"(?i)(^|[^a-z0-9]){class}mm\d+")).unwrap()
}

fn xy_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| reg_re("[xy]"))
}

fn ymm_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| reg_re("y"))
}

fn zmm_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| reg_re("z"))
}

/// Mnemonics that only exist with EVEX encoding.
const AVX512_ONLY: &[&str] = &[
    "kmov", "kand", "kor", "kxor", "knot", "kortest", "ktest", "kshift", "kunpck", "kadd", "vpternlog", "vpcompress",
    "vpexpand", "vcompress", "vexpand", "vrndscale", "vgetexp", "vgetmant", "vscalef", "vfixupimm", "vrcp14",
    "vrsqrt14", "vpermt2", "vpermi2", "valign", "vpconflict", "vplzcnt", "vpmovq", "vpmovd", "vpmovw", "vpmovus",
    "vpmovs", "vcvtqq2", "vcvtuqq2", "vcvtudq2", "vreduce", "vrange", "vfpclass", "vdbpsadbw", "vpabsq", "vpmaxsq",
    "vpminsq", "vpmullq", "vpsraq", "vpro", "vshuff32x4", "vshuff64x2", "vshufi32x4", "vshufi64x2",
];

/// v-prefixed mnemonics that are not VEX vector operations.
const NOT_VEX: &[&str] = &["verr", "verw", "vmcall", "vmlaunch", "vmresume", "vmxoff", "vmxon", "vmread", "vmwrite", "vmptrld", "vmptrst", "vmclear", "vmfunc", "vmrun", "vmload", "vmsave"];

/// AVX1 float permutes that happen to carry the `vp` prefix.
const AVX1_VP: &[&str] = &["vpermilps", "vpermilpd", "vperm2f128"];

/// Detects AVX, AVX2 and AVX-512 usage. The result is closed under
/// avx512 ⇒ avx2 ⇒ avx.
pub fn detect_isa_features(listing: &DisassemblyListing) -> IsaSet {
    let mut found = IsaSet::new();
    for insn in &listing.lines {
        let m = insn.mnemonic.as_str();
        let ops = insn.operands.as_str();
        let vex = m.starts_with('v') && !NOT_VEX.contains(&m);

        if zmm_re().is_match(ops)
            || ops.contains("{k")
            || ops.contains("{%k")
            || AVX512_ONLY.iter().any(|p| m.starts_with(p))
        {
            found.insert(IsaFeature::Avx512);
        }
        if vex && xy_re().is_match(ops) {
            found.insert(IsaFeature::Avx);
        }
        if vex && m.starts_with("vp") && !AVX1_VP.contains(&m) && ymm_re().is_match(ops) {
            found.insert(IsaFeature::Avx2);
        }
        if m.starts_with("vpbroadcast") || m.starts_with("vpgather") || m.starts_with("vgather") || m == "vperm2i128" || m == "vinserti128" || m == "vextracti128" {
            found.insert(IsaFeature::Avx2);
        }
    }
    close_isa(&found)
}

/// One call to an allocator. `bytes` is `None` when the size is not an
/// immediate reachable by the backward scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocSite {
    pub address: String,
    pub symbol: Option<String>,
    pub allocator: String,
    pub bytes: Option<u64>,
}

pub const DEFAULT_ALLOCATORS: [&str; 3] = ["malloc", "calloc", "aligned_alloc"];

/// Instructions scanned backward from a call for argument setup.
pub const ALLOC_SCAN_WINDOW: usize = 8;

/// Argument positions whose product is the allocation size.
fn size_args(allocator: &str) -> &'static [usize] {
    match allocator {
        "calloc" => &[0, 1],
        "aligned_alloc" => &[1],
        _ => &[0],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Syntax {
    /// AT&T: `op src, dst`, registers with `%`.
    Att,
    /// Intel and AArch64: `op dst, src`.
    DestFirst,
}

fn arg_registers(idx: usize) -> &'static [&'static str] {
    match idx {
        0 => &["rdi", "edi", "di", "x0", "w0"],
        1 => &["rsi", "esi", "si", "x1", "w1"],
        2 => &["rdx", "edx", "dx", "x2", "w2"],
        _ => &[],
    }
}

fn split_operands(ops: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in ops.chars() {
        match c {
            '(' | '[' | '{' => {
                depth += 1;
                cur.push(c);
            }
            ')' | ']' | '}' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => out.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_immediate(text: &str) -> Option<i128> {
    let t = text.trim();
    let t = t.strip_prefix('$').or_else(|| t.strip_prefix('#')).unwrap_or(t);
    let (neg, t) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    let v = if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        i128::from_str_radix(hex, 16).ok()?
    } else if let Some(hex) = t.strip_suffix('h').filter(|h| h.chars().all(|c| c.is_ascii_hexdigit())) {
        i128::from_str_radix(hex, 16).ok()?
    } else {
        t.parse::<i128>().ok()?
    };
    Some(if neg { -v } else { v })
}

/// What an instruction does to the argument register `idx`.
enum ArgWrite {
    Untouched,
    Immediate(u64),
    Clobbered,
}

fn reg_name(operand: &str) -> String {
    operand.trim().trim_start_matches('%').to_ascii_lowercase()
}

fn arg_write(insn: &Instruction, idx: usize) -> ArgWrite {
    if insn.is_call() {
        return ArgWrite::Clobbered;
    }
    let ops = split_operands(&insn.operands);
    let syntax = if insn.operands.contains('%') { Syntax::Att } else { Syntax::DestFirst };
    let (dst, src) = match (syntax, ops.as_slice()) {
        (_, []) => return ArgWrite::Untouched,
        (Syntax::Att, [.., src, dst]) => (dst.as_str(), Some(src.as_str())),
        (Syntax::Att, [only]) => (only.as_str(), None),
        (Syntax::DestFirst, [dst, src, ..]) => (dst.as_str(), Some(src.as_str())),
        (Syntax::DestFirst, [only]) => (only.as_str(), None),
    };
    let dst = reg_name(dst);
    let regs = arg_registers(idx);
    if !regs.contains(&dst.as_str()) {
        return ArgWrite::Untouched;
    }
    let m = insn.mnemonic.as_str();
    if m.starts_with("cmp") || m.starts_with("test") || m.starts_with("push") {
        return ArgWrite::Untouched;
    }
    let is_move = matches!(m, "mov" | "movl" | "movq" | "movabs" | "movabsq" | "movz");
    if !is_move || ops.len() != 2 {
        return ArgWrite::Clobbered;
    }
    let Some(value) = src.and_then(parse_immediate) else {
        return ArgWrite::Clobbered;
    };
    let narrow = matches!(dst.as_str(), "edi" | "esi" | "edx" | "w0" | "w1" | "w2");
    let narrow16 = matches!(dst.as_str(), "di" | "si" | "dx");
    let value = if narrow {
        // 32-bit writes zero-extend
        (value as i64 as u64) & 0xffff_ffff
    } else {
        // a 16-bit write leaves the upper bits unknown
        match u64::try_from(value) {
            Ok(v) if !narrow16 => v,
            _ => return ArgWrite::Clobbered,
        }
    };
    ArgWrite::Immediate(value)
}

fn resolve_arg(listing: &DisassemblyListing, call_idx: usize, span_start: usize, idx: usize) -> Option<u64> {
    let lowest = call_idx.saturating_sub(ALLOC_SCAN_WINDOW).max(span_start);
    for j in (lowest..call_idx).rev() {
        match arg_write(&listing.lines[j], idx) {
            ArgWrite::Untouched => continue,
            ArgWrite::Immediate(v) => return Some(v),
            ArgWrite::Clobbered => return None,
        }
    }
    None
}

/// Finds calls to `allocators` and recovers immediate size arguments by a
/// bounded backward scan within the calling symbol.
pub fn extract_allocation_sizes(listing: &DisassemblyListing, allocators: &BTreeSet<String>) -> Vec<AllocSite> {
    let mut sites = Vec::new();
    for (i, insn) in listing.lines.iter().enumerate() {
        if !(insn.is_call() || insn.is_tail_jump()) {
            continue;
        }
        let Some(target) = insn.target_symbol() else { continue };
        if !allocators.contains(target) {
            continue;
        }
        let span_start = listing.span_at(i).map_or(0, |(s, _)| s);
        let bytes = size_args(target)
            .iter()
            .map(|&arg| resolve_arg(listing, i, span_start, arg))
            .try_fold(1u64, |acc, v| v.and_then(|v| acc.checked_mul(v)));
        sites.push(AllocSite {
            address: insn.address.clone(),
            symbol: listing.symbol_at(i).map(String::from),
            allocator: target.to_string(),
            bytes,
        });
    }
    sites
}

pub fn default_allocators() -> BTreeSet<String> {
    DEFAULT_ALLOCATORS.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing(body: &str) -> DisassemblyListing {
        DisassemblyListing::parse(body)
    }

    const ALLOC: &str = "\
0000000000401130 <alloc_space>:
  401130:\t55                   \tpush   %rbp
  401136:\tbf 00 52 bc 0f       \tmov    $0xfbc5200,%edi
  40113b:\te8 1f c8 ff ff       \tcall   10a0 <malloc@plt>
  401140:\t48 89 c7             \tmov    %rax,%rdi
  401143:\te8 18 c8 ff ff       \tcall   10a0 <malloc@plt>
  401148:\tbf 10 00 00 00       \tmov    $0x10,%edi
  40114d:\tbe 08 00 00 00       \tmov    $0x8,%esi
  401152:\te8 29 c8 ff ff       \tcall   10c0 <calloc@plt>
";

    #[test]
    fn parses_objdump_text() {
        let l = listing(ALLOC);
        assert_eq!(l.lines.len(), 8);
        assert_eq!(l.lines[1].mnemonic, "mov");
        assert_eq!(l.lines[1].operands, "$0xfbc5200,%edi");
        assert_eq!(l.lines[1].bytes, "bf 00 52 bc 0f");
        assert_eq!(l.lines[2].target_symbol(), Some("malloc"));
        assert_eq!(l.symbol_spans["alloc_space"], (0, 8));
    }

    #[test]
    fn parses_four_field_form_and_prefixes() {
        let l = listing("0 <f>:\n  10:\tf3 c3\trep\tret\n  12:\tf2 e8 00\tbnd call\t20 <g>\n  13:\t00 00\n");
        assert_eq!(l.lines.len(), 2);
        assert_eq!(l.lines[0].mnemonic, "ret");
        assert_eq!(l.lines[1].mnemonic, "call");
        assert_eq!(l.lines[1].target_symbol(), Some("g"));
    }

    #[test]
    fn allocation_examples() {
        let sites = extract_allocation_sizes(&listing(ALLOC), &default_allocators());
        assert_eq!(sites.len(), 3);
        assert_eq!(sites[0].bytes, Some(264_000_000));
        assert_eq!(sites[0].symbol.as_deref(), Some("alloc_space"));
        assert_eq!(sites[1].bytes, None);
        assert_eq!(sites[2].allocator, "calloc");
        assert_eq!(sites[2].bytes, Some(16 * 8));
    }

    #[test]
    fn scan_stops_at_window_and_symbol_boundary() {
        let mut body = String::from("0 <f>:\n  1:\tbf 00 10 00 00\tmov    $0x1000,%edi\n");
        for k in 0..ALLOC_SCAN_WINDOW {
            body.push_str(&format!("  {:x}:\t90\tnop\n", k + 2));
        }
        body.push_str("  40:\te8 00\tcall   0 <malloc@plt>\n");
        assert_eq!(extract_allocation_sizes(&listing(&body), &default_allocators())[0].bytes, None);

        let split = "0 <f>:\n  1:\tbf\tmov    $0x1000,%edi\n10 <g>:\n  11:\te8\tcall   0 <malloc@plt>\n";
        assert_eq!(extract_allocation_sizes(&listing(split), &default_allocators())[0].bytes, None);
    }

    #[test]
    fn intervening_call_clobbers_argument() {
        let body = "0 <f>:\n  1:\tbf\tmov    $0x1000,%edi\n  2:\te8\tcall   0 <foo>\n  3:\te8\tcall   0 <malloc@plt>\n";
        assert_eq!(extract_allocation_sizes(&listing(body), &default_allocators())[0].bytes, None);
    }

    #[test]
    fn aarch64_immediates() {
        let body = "0 <f>:\n  4:\td2800200 \tmov\tx0, #0x10\n  8:\t94000000 \tbl\t0 <malloc@plt>\n";
        let sites = extract_allocation_sizes(&listing(body), &default_allocators());
        assert_eq!(sites[0].bytes, Some(16));
    }

    #[test]
    fn movabs_into_rdi() {
        let body = "0 <f>:\n  1:\t48 bf\tmovabs $0x400000000,%rdi\n  2:\te8\tcall   0 <malloc@plt>\n";
        assert_eq!(extract_allocation_sizes(&listing(body), &default_allocators())[0].bytes, Some(16 << 30));
    }

    #[test]
    fn isa_examples() {
        let avx = listing("0 <f>:\n  1:\tc5 fd 59 c1\tvmulpd %ymm1,%ymm0,%ymm0\n");
        assert!(detect_isa_features(&avx).contains(&IsaFeature::Avx));
        assert!(!detect_isa_features(&avx).contains(&IsaFeature::Avx512));

        let plain = listing("0 <f>:\n  1:\t48 89 c7\tmov    %rax,%rdi\n  2:\t48 01 d8\tadd    %rbx,%rax\n");
        assert!(detect_isa_features(&plain).is_empty());

        let zmm = listing("0 <f>:\n  1:\t62 f1 fd 48 58 c1\tvaddpd %zmm1,%zmm0,%zmm0\n");
        assert_eq!(
            detect_isa_features(&zmm),
            [IsaFeature::Avx, IsaFeature::Avx2, IsaFeature::Avx512].into()
        );

        let avx2 = listing("0 <f>:\n  1:\tc5 fd fe c1\tvpaddd %ymm1,%ymm0,%ymm0\n");
        assert_eq!(detect_isa_features(&avx2), [IsaFeature::Avx, IsaFeature::Avx2].into());

        let sse = listing("0 <f>:\n  1:\t66 0f 58 c1\taddpd  %xmm1,%xmm0\n");
        assert!(detect_isa_features(&sse).is_empty());

        let opmask = listing("0 <f>:\n  1:\t62\tvmovapd %xmm1,%xmm0{%k1}\n");
        assert!(detect_isa_features(&opmask).contains(&IsaFeature::Avx512));
    }

    #[test]
    fn empty_listing_yields_nothing() {
        let l = DisassemblyListing::default();
        assert!(detect_isa_features(&l).is_empty());
        assert!(extract_allocation_sizes(&l, &default_allocators()).is_empty());
    }
}
