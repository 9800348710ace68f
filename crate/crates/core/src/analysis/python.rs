//! Static import scan over a Python entry point and its local module tree.

use std::collections::{BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::AnalysisError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportScan {
    /// External modules by top-level name plus local modules by dotted name.
    pub modules: BTreeSet<String>,
    pub local_modules: BTreeSet<String>,
    /// One note per dynamic import that was seen but not resolved.
    pub unknown: Vec<String>,
    /// `(importer, imported)` pairs; the entry point is `__main__`.
    pub edges: BTreeSet<(String, String)>,
}

impl ImportScan {
    pub fn external_modules(&self) -> impl Iterator<Item = &String> {
        self.modules.iter().filter(|m| !self.local_modules.contains(*m))
    }
}

fn import_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^import\s+(.+)$").unwrap())
}

fn from_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^from\s+(\.*)([A-Za-z_][\w.]*)?\s+import\s+(.+)$").unwrap())
}

fn dynamic_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(__import__|importlib\.import_module|import_module)\s*\(").unwrap())
}

/// A parsed import statement.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Import {
    /// `import a.b` (aliases dropped).
    Absolute(String),
    /// `from <dots><module> import names`.
    From { level: usize, module: String, names: Vec<String> },
}

/// Removes a trailing comment, honoring simple string literals.
fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        match (quote, c) {
            (Some(_), '\\') => escaped = true,
            (Some(q), c) if c == q => quote = None,
            (None, '\'' | '"') => quote = Some(c),
            (None, '#') => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Logical lines with comments, docstrings, continuations and
/// parenthesized import lists folded. Returns `(line number, text)`.
fn logical_lines(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut in_triple: Option<&str> = None;
    let mut pending: Option<(usize, String)> = None;
    let mut depth: i32 = 0;

    for (n, raw) in text.lines().enumerate() {
        let mut line = raw;
        if let Some(delim) = in_triple {
            match line.find(delim) {
                Some(end) => {
                    in_triple = None;
                    line = &line[end + 3..];
                }
                None => continue,
            }
        }
        // drop complete and opening triple-quoted segments
        let mut cleaned = String::new();
        let mut rest = line;
        loop {
            let next = ["\"\"\"", "'''"]
                .iter()
                .filter_map(|d| rest.find(d).map(|i| (i, *d)))
                .min_by_key(|(i, _)| *i);
            match next {
                Some((i, delim)) if strip_comment(&rest[..i]).len() == i => {
                    cleaned.push_str(&rest[..i]);
                    let after = &rest[i + 3..];
                    match after.find(delim) {
                        Some(end) => rest = &after[end + 3..],
                        None => {
                            in_triple = Some(delim);
                            rest = "";
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        cleaned.push_str(rest);
        let code = strip_comment(&cleaned).trim_end().to_string();

        let (start, mut acc) = pending.take().unwrap_or((n + 1, String::new()));
        if !acc.is_empty() {
            acc.push(' ');
        }
        let continued = code.ends_with('\\');
        acc.push_str(code.trim_end_matches('\\').trim());
        depth += code.matches('(').count() as i32 - code.matches(')').count() as i32;
        if continued || depth > 0 {
            pending = Some((start, acc));
        } else {
            depth = 0;
            out.push((start, acc));
        }
    }
    if let Some(p) = pending {
        out.push(p);
    }
    out
}

fn parse_statement(stmt: &str) -> Option<Import> {
    let stmt = stmt.trim();
    if let Some(cap) = from_re().captures(stmt) {
        let level = cap[1].len();
        let module = cap.get(2).map_or("", |m| m.as_str()).to_string();
        let names = cap[3]
            .trim_matches(|c| c == '(' || c == ')' || c == ' ')
            .split(',')
            .filter_map(|n| n.split_whitespace().next())
            .filter(|n| *n != "*")
            .map(String::from)
            .collect();
        return Some(Import::From { level, module, names });
    }
    None.or_else(|| {
        let cap = import_re().captures(stmt)?;
        Some(Import::Absolute(cap[1].to_string()))
    })
}

fn parse_imports(text: &str, file: &Path) -> (Vec<Import>, Vec<String>) {
    let mut imports = Vec::new();
    let mut unknown = Vec::new();
    for (line_no, line) in logical_lines(text) {
        if dynamic_re().is_match(&line) {
            unknown.push(format!("{}:{line_no}: dynamic import not resolved", file.display()));
        }
        for stmt in line.split(';') {
            match parse_statement(stmt) {
                Some(Import::Absolute(list)) => {
                    for part in list.split(',') {
                        if let Some(name) = part.split_whitespace().next() {
                            imports.push(Import::Absolute(name.to_string()));
                        }
                    }
                }
                Some(other) => imports.push(other),
                None => {}
            }
        }
    }
    (imports, unknown)
}

fn valid_module(name: &str) -> bool {
    !name.is_empty()
        && name
            .split('.')
            .all(|p| !p.is_empty() && p.chars().all(|c| c.is_alphanumeric() || c == '_') && !p.starts_with(|c: char| c.is_ascii_digit()))
}

struct Resolver {
    roots: Vec<PathBuf>,
}

impl Resolver {
    /// File for module `parts` below `dir`: `a/b.py` or `a/b/__init__.py`.
    fn file_under(dir: &Path, parts: &[&str]) -> Option<PathBuf> {
        if parts.is_empty() {
            let init = dir.join("__init__.py");
            return if init.is_file() { Some(init) } else { dir.is_dir().then(|| dir.to_path_buf()) };
        }
        let mut p = dir.to_path_buf();
        for part in parts {
            p.push(part);
        }
        let file = p.with_extension("py");
        if file.is_file() {
            return Some(file);
        }
        let init = p.join("__init__.py");
        if init.is_file() {
            return Some(init);
        }
        // namespace package: a directory without __init__.py
        p.is_dir().then_some(p)
    }

    fn absolute(&self, dotted: &str) -> Option<PathBuf> {
        let parts: Vec<&str> = dotted.split('.').collect();
        self.roots.iter().find_map(|r| Self::file_under(r, &parts))
    }

    /// Dotted name of a local file relative to the first containing root.
    fn module_name(&self, path: &Path) -> Option<String> {
        for root in &self.roots {
            if let Ok(rel) = path.strip_prefix(root) {
                let mut parts: Vec<String> = rel.iter().map(|c| c.to_string_lossy().into_owned()).collect();
                let last = parts.pop()?;
                if last != "__init__.py" {
                    parts.push(last.strip_suffix(".py").unwrap_or(&last).to_string());
                }
                if parts.is_empty() {
                    continue;
                }
                return Some(parts.join("."));
            }
        }
        None
    }
}

/// Scans `entry` and every local module it reaches. External modules are
/// recorded by top-level name; dynamic imports are noted, never resolved.
pub fn scan_python_imports(entry: &Path, module_roots: &[PathBuf]) -> Result<ImportScan, AnalysisError> {
    let entry_dir = entry.parent().map(Path::to_path_buf).unwrap_or_default();
    let entry_dir = if entry_dir.as_os_str().is_empty() { PathBuf::from(".") } else { entry_dir };
    let mut roots = vec![entry_dir];
    roots.extend(module_roots.iter().cloned());
    let roots = roots
        .into_iter()
        .map(|r| r.canonicalize().unwrap_or(r))
        .collect();
    let resolver = Resolver { roots };

    let mut scan = ImportScan::default();
    let mut visited: BTreeSet<PathBuf> = BTreeSet::new();
    let entry_canon = entry.canonicalize().map_err(|e| AnalysisError::io(entry, e))?;
    let mut queue = VecDeque::from([(entry_canon, "__main__".to_string())]);

    while let Some((file, name)) = queue.pop_front() {
        if !visited.insert(file.clone()) || file.is_dir() {
            continue;
        }
        let bytes = std::fs::read(&file).map_err(|e| AnalysisError::io(&file, e))?;
        if bytes.contains(&0) {
            return Err(AnalysisError::SyntaxUnreadable(file));
        }
        let text = String::from_utf8(bytes).map_err(|_| AnalysisError::SyntaxUnreadable(file.clone()))?;
        let (imports, unknown) = parse_imports(&text, &file);
        scan.unknown.extend(unknown);
        let file_dir = file.parent().map(Path::to_path_buf).unwrap_or_default();

        let mut found = |target: String, path: Option<PathBuf>, scan: &mut ImportScan| {
            scan.edges.insert((name.clone(), target.clone()));
            match path {
                Some(p) => {
                    // parent packages are imported too
                    let mut prefix = String::new();
                    for part in target.split('.') {
                        if !prefix.is_empty() {
                            prefix.push('.');
                        }
                        prefix.push_str(part);
                        if resolver.absolute(&prefix).is_some() || prefix == target {
                            scan.local_modules.insert(prefix.clone());
                            scan.modules.insert(prefix.clone());
                        }
                    }
                    queue.push_back((p, target));
                }
                None => {
                    let top = target.split('.').next().unwrap_or(&target).to_string();
                    scan.modules.insert(top);
                }
            }
        };

        for import in imports {
            match import {
                Import::Absolute(dotted) if valid_module(&dotted) => {
                    let path = resolver.absolute(&dotted);
                    found(dotted, path, &mut scan);
                }
                Import::Absolute(_) => {}
                Import::From { level: 0, module, names } => {
                    if !valid_module(&module) {
                        continue;
                    }
                    let path = resolver.absolute(&module);
                    let is_local = path.is_some();
                    found(module.clone(), path, &mut scan);
                    if is_local {
                        for n in names {
                            let sub = format!("{module}.{n}");
                            if let Some(p) = resolver.absolute(&sub) {
                                found(sub, Some(p), &mut scan);
                            }
                        }
                    }
                }
                Import::From { level, module, names } => {
                    let mut base = file_dir.clone();
                    for _ in 1..level {
                        base.pop();
                    }
                    let parts: Vec<&str> = if module.is_empty() { Vec::new() } else { module.split('.').collect() };
                    if let Some(p) = Resolver::file_under(&base, &parts) {
                        let target = resolver.module_name(&p).unwrap_or_else(|| module.clone());
                        if !target.is_empty() && !module.is_empty() {
                            found(target.clone(), Some(p.clone()), &mut scan);
                        }
                        let pkg_dir = if p.is_dir() { p } else { p.parent().map(Path::to_path_buf).unwrap_or_default() };
                        for n in names {
                            if let Some(sp) = Resolver::file_under(&pkg_dir, &[n.as_str()]) {
                                if let Some(sub) = resolver.module_name(&sp) {
                                    found(sub, Some(sp), &mut scan);
                                }
                            }
                        }
                    } else {
                        scan.unknown.push(format!(
                            "{}: relative import {}{} not found locally",
                            file.display(),
                            ".".repeat(level),
                            module
                        ));
                    }
                }
            }
        }
    }
    scan.modules.remove("__main__");
    Ok(scan)
}
