//! Minimal ELF reader: header identity, `DT_NEEDED` entries and symbol tables.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::AnalysisError;
use crate::submission::ELF_MAGIC;

pub const EM_X86_64: u16 = 62;
pub const EM_AARCH64: u16 = 183;

const SHT_SYMTAB: u32 = 2;
const SHT_DYNAMIC: u32 = 6;
const SHT_DYNSYM: u32 = 11;
const DT_NULL: u64 = 0;
const DT_NEEDED: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Machine {
    X86_64,
    Aarch64,
    Other(u16),
}

impl Machine {
    pub fn from_code(code: u16) -> Machine {
        match code {
            EM_X86_64 => Machine::X86_64,
            EM_AARCH64 => Machine::Aarch64,
            other => Machine::Other(other),
        }
    }
}

impl fmt::Display for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Machine::X86_64 => f.write_str("x86_64"),
            Machine::Aarch64 => f.write_str("aarch64"),
            Machine::Other(code) => write!(f, "other:{code}"),
        }
    }
}

impl FromStr for Machine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x86_64" => Ok(Machine::X86_64),
            "aarch64" => Ok(Machine::Aarch64),
            other => other
                .strip_prefix("other:")
                .and_then(|c| c.parse().ok())
                .map(Machine::Other)
                .ok_or_else(|| format!("unknown machine `{other}`")),
        }
    }
}

impl Serialize for Machine {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Machine {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElfClass {
    Elf32,
    Elf64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Defined,
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    pub kind: SymbolKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElfMetadata {
    pub machine: Machine,
    pub class: ElfClass,
    pub dynamic_deps: Vec<String>,
    pub symbols: Vec<Symbol>,
}

#[derive(Clone, Copy)]
struct Reader<'a> {
    data: &'a [u8],
    big_endian: bool,
}

impl<'a> Reader<'a> {
    fn bytes<const N: usize>(&self, off: u64) -> Option<[u8; N]> {
        let off = usize::try_from(off).ok()?;
        self.data.get(off..off.checked_add(N)?)?.try_into().ok()
    }

    fn u16(&self, off: u64) -> Option<u16> {
        let b = self.bytes::<2>(off)?;
        Some(if self.big_endian { u16::from_be_bytes(b) } else { u16::from_le_bytes(b) })
    }

    fn u32(&self, off: u64) -> Option<u32> {
        let b = self.bytes::<4>(off)?;
        Some(if self.big_endian { u32::from_be_bytes(b) } else { u32::from_le_bytes(b) })
    }

    fn u64(&self, off: u64) -> Option<u64> {
        let b = self.bytes::<8>(off)?;
        Some(if self.big_endian { u64::from_be_bytes(b) } else { u64::from_le_bytes(b) })
    }

    /// Reads a class-sized word: 4 bytes for ELF32, 8 for ELF64.
    fn word(&self, class: ElfClass, off: u64) -> Option<u64> {
        match class {
            ElfClass::Elf32 => self.u32(off).map(u64::from),
            ElfClass::Elf64 => self.u64(off),
        }
    }

    fn cstr(&self, off: u64) -> Option<&'a str> {
        let start = usize::try_from(off).ok()?;
        let rest = self.data.get(start..)?;
        let end = rest.iter().position(|&b| b == 0)?;
        std::str::from_utf8(&rest[..end]).ok()
    }
}

struct Section {
    kind: u32,
    offset: u64,
    size: u64,
    link: u32,
    entsize: u64,
}

fn sections(r: Reader<'_>, class: ElfClass) -> Vec<Section> {
    let (shoff, shentsize, shnum) = match class {
        ElfClass::Elf64 => (r.u64(0x28), r.u16(0x3A), r.u16(0x3C)),
        ElfClass::Elf32 => (r.u32(0x20).map(u64::from), r.u16(0x2E), r.u16(0x30)),
    };
    let (Some(shoff), Some(shentsize), Some(shnum)) = (shoff, shentsize, shnum) else {
        return Vec::new();
    };
    if shoff == 0 || shentsize == 0 {
        return Vec::new();
    }
    (0..u64::from(shnum))
        .filter_map(|i| {
            let base = shoff.checked_add(i * u64::from(shentsize))?;
            Some(match class {
                ElfClass::Elf64 => Section {
                    kind: r.u32(base + 4)?,
                    offset: r.u64(base + 24)?,
                    size: r.u64(base + 32)?,
                    link: r.u32(base + 40)?,
                    entsize: r.u64(base + 56)?,
                },
                ElfClass::Elf32 => Section {
                    kind: r.u32(base + 4)?,
                    offset: u64::from(r.u32(base + 16)?),
                    size: u64::from(r.u32(base + 20)?),
                    link: r.u32(base + 24)?,
                    entsize: u64::from(r.u32(base + 36)?),
                },
            })
        })
        .collect()
}

fn needed_libraries(r: Reader<'_>, class: ElfClass, secs: &[Section]) -> Vec<String> {
    let entry_size = match class {
        ElfClass::Elf32 => 8,
        ElfClass::Elf64 => 16,
    };
    let half = entry_size / 2;
    let mut out = Vec::new();
    for dynamic in secs.iter().filter(|s| s.kind == SHT_DYNAMIC) {
        let Some(strtab) = secs.get(dynamic.link as usize) else { continue };
        let count = dynamic.size / entry_size;
        for i in 0..count {
            let at = dynamic.offset + i * entry_size;
            let (Some(tag), Some(val)) = (r.word(class, at), r.word(class, at + half)) else {
                break;
            };
            if tag == DT_NULL {
                break;
            }
            if tag == DT_NEEDED && val < strtab.size {
                if let Some(name) = r.cstr(strtab.offset + val) {
                    out.push(name.to_string());
                }
            }
        }
    }
    out
}

fn symbol_table(r: Reader<'_>, class: ElfClass, secs: &[Section]) -> Vec<Symbol> {
    let default_size = match class {
        ElfClass::Elf32 => 16,
        ElfClass::Elf64 => 24,
    };
    let mut seen = BTreeSet::new();
    for table in secs.iter().filter(|s| s.kind == SHT_DYNSYM || s.kind == SHT_SYMTAB) {
        let Some(strtab) = secs.get(table.link as usize) else { continue };
        let entsize = if table.entsize == 0 { default_size } else { table.entsize };
        // index 0 is the reserved null symbol
        for i in 1..table.size / entsize {
            let at = table.offset + i * entsize;
            let (name_off, shndx) = match class {
                ElfClass::Elf64 => (r.u32(at), r.u16(at + 6)),
                ElfClass::Elf32 => (r.u32(at), r.u16(at + 14)),
            };
            let (Some(name_off), Some(shndx)) = (name_off, shndx) else { break };
            if u64::from(name_off) >= strtab.size {
                continue;
            }
            let Some(name) = r.cstr(strtab.offset + u64::from(name_off)) else { continue };
            if name.is_empty() {
                continue;
            }
            let kind = if shndx == 0 { SymbolKind::Undefined } else { SymbolKind::Defined };
            seen.insert(Symbol {
                name: name.to_string(),
                kind,
            });
        }
    }
    seen.into_iter().collect()
}

/// Decodes an in-memory ELF image.
pub fn parse_elf_bytes(data: &[u8]) -> Result<ElfMetadata, AnalysisError> {
    if data.len() < ELF_MAGIC.len() {
        return Err(AnalysisError::TruncatedHeader);
    }
    if data[..4] != ELF_MAGIC {
        return Err(AnalysisError::NotAnElf);
    }
    if data.len() < 16 {
        return Err(AnalysisError::TruncatedHeader);
    }
    let class = match data[4] {
        1 => ElfClass::Elf32,
        2 => ElfClass::Elf64,
        other => return Err(AnalysisError::UnsupportedClass(other)),
    };
    let big_endian = match data[5] {
        1 => false,
        2 => true,
        other => return Err(AnalysisError::UnsupportedEncoding(other)),
    };
    let header_len = match class {
        ElfClass::Elf32 => 52,
        ElfClass::Elf64 => 64,
    };
    if data.len() < header_len {
        return Err(AnalysisError::TruncatedHeader);
    }
    let r = Reader { data, big_endian };
    let machine = Machine::from_code(r.u16(18).ok_or(AnalysisError::TruncatedHeader)?);
    let secs = sections(r, class);
    Ok(ElfMetadata {
        machine,
        class,
        dynamic_deps: needed_libraries(r, class, &secs),
        symbols: symbol_table(r, class, &secs),
    })
}

pub fn parse_elf_header(path: &Path) -> Result<ElfMetadata, AnalysisError> {
    let data = std::fs::read(path).map_err(|e| AnalysisError::io(path, e))?;
    parse_elf_bytes(&data)
}
