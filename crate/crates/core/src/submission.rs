//! Job submission: invocation parsing, workload classification and
//! normalization into a [`JobSpec`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::PartialBundle;

#[derive(Debug, Error)]
pub enum SubmissionError {
    #[error("run command is empty")]
    EmptyCommand,
    #[error("unbalanced quote in run command")]
    UnbalancedQuote,
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot determine workload kind of {0}")]
    UnknownWorkloadKind(PathBuf),
    #[error("no runnable entry point found in command `{0}`")]
    EntryNotFound(String),
    #[error("artifact {0} does not exist")]
    MissingArtifact(PathBuf),
    #[error("--instance-type bypasses recommendation and cannot be combined with extra constraints")]
    ConflictingOverrides,
    #[error("invalid value for --{flag}: {value}")]
    InvalidFlag { flag: String, value: String },
    #[error("invalid job id `{0}`")]
    InvalidJobId(String),
    #[error("staging failed: {0}")]
    Staging(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SubmissionError>;

/// Command line, tokens and environment of a submitted job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationContext {
    pub command: String,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub wrapper_scripts: Vec<PathBuf>,
}

impl InvocationContext {
    /// Renders `NAME=value ... args` with shell quoting such that reparsing
    /// yields this context again.
    pub fn render(&self) -> String {
        let mut words: Vec<String> = self
            .env
            .iter()
            .map(|(k, v)| format!("{k}={}", quote_word(v)))
            .collect();
        words.extend(self.args.iter().map(|a| quote_word(a)));
        words.join(" ")
    }
}

fn quote_word(word: &str) -> String {
    let safe = !word.is_empty()
        && word
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./:,+@%".contains(c));
    if safe {
        word.to_string()
    } else {
        format!("'{}'", word.replace('\'', r"'\''"))
    }
}

struct Word {
    text: String,
    /// Byte offset in `text` of the first character that came from a quoted
    /// or escaped region, if any.
    first_quoted: Option<usize>,
}

impl Word {
    fn assignment(&self) -> Option<(&str, &str)> {
        let eq = self.text.find('=')?;
        if self.first_quoted.is_some_and(|q| q <= eq) {
            return None;
        }
        let name = &self.text[..eq];
        is_env_name(name).then(|| (name, &self.text[eq + 1..]))
    }
}

fn is_env_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

/// POSIX field splitting with quote removal. No expansion of any kind.
fn split_words(raw: &str) -> Result<Vec<Word>> {
    let mut words = Vec::new();
    let mut cur: Option<Word> = None;
    let mut chars = raw.chars().peekable();

    fn word(cur: &mut Option<Word>) -> &mut Word {
        cur.get_or_insert_with(|| Word {
            text: String::new(),
            first_quoted: None,
        })
    }
    fn mark(w: &mut Word) {
        if w.first_quoted.is_none() {
            w.first_quoted = Some(w.text.len());
        }
    }

    while let Some(c) = chars.next() {
        match c {
            ' ' | '\t' | '\n' => {
                if let Some(w) = cur.take() {
                    words.push(w);
                }
            }
            '\'' => {
                let w = word(&mut cur);
                mark(w);
                loop {
                    match chars.next() {
                        Some('\'') => break,
                        Some(ch) => w.text.push(ch),
                        None => return Err(SubmissionError::UnbalancedQuote),
                    }
                }
            }
            '"' => {
                let w = word(&mut cur);
                mark(w);
                loop {
                    match chars.next() {
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some(ch @ ('$' | '`' | '"' | '\\')) => w.text.push(ch),
                            Some('\n') => {}
                            Some(ch) => {
                                w.text.push('\\');
                                w.text.push(ch);
                            }
                            None => return Err(SubmissionError::UnbalancedQuote),
                        },
                        Some(ch) => w.text.push(ch),
                        None => return Err(SubmissionError::UnbalancedQuote),
                    }
                }
            }
            '\\' => match chars.next() {
                Some('\n') => {}
                Some(ch) => {
                    let w = word(&mut cur);
                    mark(w);
                    w.text.push(ch);
                }
                None => return Err(SubmissionError::UnbalancedQuote),
            },
            ch => word(&mut cur).text.push(ch),
        }
    }
    if let Some(w) = cur.take() {
        words.push(w);
    }
    Ok(words)
}

/// Splits a run command into leading environment assignments and argument
/// tokens. Assignments in `extra_env` are merged underneath the explicit ones.
pub fn parse_invocation(
    raw_command: &str,
    extra_env: &BTreeMap<String, String>,
) -> Result<InvocationContext> {
    if raw_command.trim().is_empty() {
        return Err(SubmissionError::EmptyCommand);
    }
    let words = split_words(raw_command)?;
    let mut env = extra_env.clone();
    let mut idx = 0;
    while let Some((name, value)) = words.get(idx).and_then(Word::assignment) {
        env.insert(name.to_string(), value.to_string());
        idx += 1;
    }
    let args: Vec<String> = words[idx..].iter().map(|w| w.text.clone()).collect();
    if args.is_empty() {
        return Err(SubmissionError::EmptyCommand);
    }
    Ok(InvocationContext {
        command: raw_command.trim().to_string(),
        args,
        env,
        wrapper_scripts: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    CompiledBinary,
    ShellScript,
    InterpretedEntryPoint,
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkloadKind::CompiledBinary => "compiled_binary",
            WorkloadKind::ShellScript => "shell_script",
            WorkloadKind::InterpretedEntryPoint => "interpreted_entry_point",
        })
    }
}

pub const ELF_MAGIC: [u8; 4] = [0x7f, b'E', b'L', b'F'];

const SHELLS: &[&str] = &["sh", "bash", "dash", "zsh", "ksh", "mksh", "csh", "tcsh", "fish"];
const INTERPRETERS: &[&str] = &[
    "python", "python2", "python3", "pypy", "pypy3", "perl", "ruby", "node", "nodejs", "Rscript",
    "julia", "lua", "php", "tclsh", "octave",
];
const INTERPRETED_EXTENSIONS: &[&str] = &["py", "pl", "rb", "js", "r", "jl", "lua", "php", "tcl", "m"];
const SHELL_EXTENSIONS: &[&str] = &["sh", "bash", "zsh", "ksh", "csh"];

fn interpreter_family(name: &str) -> Option<WorkloadKind> {
    let base = name.rsplit('/').next().unwrap_or(name);
    if SHELLS.contains(&base) {
        return Some(WorkloadKind::ShellScript);
    }
    // python3.11 and friends
    let stem = base.trim_end_matches(|c: char| c.is_ascii_digit() || c == '.');
    if INTERPRETERS.contains(&base) || INTERPRETERS.contains(&stem) {
        return Some(WorkloadKind::InterpretedEntryPoint);
    }
    None
}

/// Classifies file bytes: ELF magic, then shebang, then extension.
pub fn classify_bytes(head: &[u8], file_name: &str) -> Option<WorkloadKind> {
    if head.starts_with(&ELF_MAGIC) {
        return Some(WorkloadKind::CompiledBinary);
    }
    if head.starts_with(b"#!") {
        let line_end = head.iter().position(|&b| b == b'\n').unwrap_or(head.len());
        let line = String::from_utf8_lossy(&head[2..line_end]);
        let mut tokens = line.split_whitespace();
        if let Some(first) = tokens.next() {
            let kind = if first.rsplit('/').next() == Some("env") {
                tokens
                    .find(|t| !t.starts_with('-') && !t.contains('='))
                    .and_then(interpreter_family)
            } else {
                interpreter_family(first)
            };
            if kind.is_some() {
                return kind;
            }
        }
    }
    let ext = Path::new(file_name)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)?;
    if SHELL_EXTENSIONS.contains(&ext.as_str()) {
        Some(WorkloadKind::ShellScript)
    } else if INTERPRETED_EXTENSIONS.contains(&ext.as_str()) {
        Some(WorkloadKind::InterpretedEntryPoint)
    } else {
        None
    }
}

pub fn classify_workload(entry_path: &Path) -> Result<WorkloadKind> {
    let unreadable = |source| SubmissionError::UnreadableFile {
        path: entry_path.to_path_buf(),
        source,
    };
    let mut file = fs::File::open(entry_path).map_err(unreadable)?;
    let mut head = Vec::with_capacity(512);
    file.by_ref().take(512).read_to_end(&mut head).map_err(unreadable)?;
    let name = entry_path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    classify_bytes(&head, name).ok_or_else(|| SubmissionError::UnknownWorkloadKind(entry_path.to_path_buf()))
}

/// Sortable, timestamp-ordered job identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct JobId(String);

impl JobId {
    /// Issues a fresh id. Ids are microsecond timestamps bumped to stay
    /// strictly increasing within the process, zero padded to 20 digits.
    pub fn generate() -> JobId {
        static LAST: AtomicU64 = AtomicU64::new(0);
        let now = chrono::Utc::now().timestamp_micros().max(0) as u64;
        let mut prev = LAST.load(Ordering::Relaxed);
        loop {
            let next = now.max(prev + 1);
            match LAST.compare_exchange_weak(prev, next, Ordering::AcqRel, Ordering::Relaxed) {
                Ok(_) => return JobId(format!("{next:020}")),
                Err(actual) => prev = actual,
            }
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_valid(s: &str) -> bool {
        !s.is_empty()
            && s.len() <= 64
            && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !s.starts_with('.')
    }
}

impl FromStr for JobId {
    type Err = SubmissionError;

    fn from_str(s: &str) -> Result<Self> {
        if JobId::is_valid(s) {
            Ok(JobId(s.to_string()))
        } else {
            Err(SubmissionError::InvalidJobId(s.to_string()))
        }
    }
}

impl TryFrom<String> for JobId {
    type Error = SubmissionError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<JobId> for String {
    fn from(id: JobId) -> String {
        id.0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactRole {
    SourceTree,
    Docs,
    BuildFiles,
    EvidenceFile,
}

impl ArtifactRole {
    fn dir_name(self) -> &'static str {
        match self {
            ArtifactRole::SourceTree => "source_tree",
            ArtifactRole::Docs => "docs",
            ArtifactRole::BuildFiles => "build_files",
            ArtifactRole::EvidenceFile => "evidence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxArtifact {
    pub role: ArtifactRole,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ram_gb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_constraints: Option<PartialBundle>,
}

impl UserOverrides {
    pub fn is_empty(&self) -> bool {
        self.ram_gb.is_none()
            && self.cloud.is_none()
            && self.instance_type.is_none()
            && self.extra_constraints.as_ref().map_or(true, PartialBundle::is_empty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: JobId,
    pub workload_kind: WorkloadKind,
    pub entry_path: PathBuf,
    pub invocation: InvocationContext,
    #[serde(default)]
    pub aux_artifacts: Vec<AuxArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_overrides: Option<UserOverrides>,
    #[serde(default)]
    pub history_refs: Vec<JobId>,
}

impl JobSpec {
    /// True when the user named an instance type and recommendation is skipped.
    pub fn recommendation_bypassed(&self) -> bool {
        self.user_overrides
            .as_ref()
            .is_some_and(|o| o.instance_type.is_some())
    }

    pub fn artifacts(&self, role: ArtifactRole) -> impl Iterator<Item = &Path> {
        self.aux_artifacts
            .iter()
            .filter(move |a| a.role == role)
            .map(|a| a.path.as_path())
    }
}

/// Typed form of the `run` flags that shape a submission.
#[derive(Debug, Clone, Default)]
pub struct SubmissionOptions {
    pub job_src: Vec<PathBuf>,
    pub docs: Vec<PathBuf>,
    pub build_files: Vec<PathBuf>,
    pub evidence: Vec<PathBuf>,
    pub job_history: Vec<String>,
    pub ram_gb: Option<f64>,
    pub cloud: Option<String>,
    pub instance_type: Option<String>,
    pub extra_constraints: Option<PartialBundle>,
    pub extra_env: BTreeMap<String, String>,
    pub wrapper_scripts: Vec<PathBuf>,
    /// Directory relative command paths resolve against (default: cwd).
    pub workdir: Option<PathBuf>,
}

impl SubmissionOptions {
    /// Builds options from `--flag value` pairs as they appear on the command line.
    pub fn from_flags(flags: &BTreeMap<String, String>) -> Result<Self> {
        let mut opts = SubmissionOptions::default();
        let paths = |v: &str| v.split(',').filter(|s| !s.is_empty()).map(PathBuf::from).collect::<Vec<_>>();
        for (flag, value) in flags {
            let invalid = || SubmissionError::InvalidFlag {
                flag: flag.clone(),
                value: value.clone(),
            };
            match flag.trim_start_matches('-') {
                "job-src" => opts.job_src.extend(paths(value)),
                "docs" => opts.docs.extend(paths(value)),
                "build-files" => opts.build_files.extend(paths(value)),
                "evidence" => opts.evidence.extend(paths(value)),
                "wrapper" => opts.wrapper_scripts.extend(paths(value)),
                "job-history" => opts
                    .job_history
                    .extend(value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from)),
                "ram" => {
                    let gb: f64 = value.trim().parse().map_err(|_| invalid())?;
                    if !(gb.is_finite() && gb > 0.0) {
                        return Err(invalid());
                    }
                    opts.ram_gb = Some(gb);
                }
                "cloud" => opts.cloud = Some(value.clone()),
                "instance-type" => opts.instance_type = Some(value.clone()),
                "workdir" => opts.workdir = Some(PathBuf::from(value)),
                "constraints" => {
                    opts.extra_constraints = Some(serde_json::from_str(value).map_err(|_| invalid())?)
                }
                _ => return Err(invalid()),
            }
        }
        Ok(opts)
    }
}

const LAUNCHERS: &[&str] = &["mpirun", "mpiexec", "srun", "aprun", "env", "time", "nohup", "taskset", "numactl"];

/// Finds the file the command actually runs: the first argument that is not
/// an option, a launcher, an interpreter or a bare number.
fn resolve_entry(args: &[String], workdir: &Path) -> Option<PathBuf> {
    let arg = args.iter().find(|arg| {
        let base = arg.rsplit('/').next().unwrap_or(arg);
        !(arg.starts_with('-')
            || arg.contains('=')
            || arg.parse::<f64>().is_ok()
            || LAUNCHERS.contains(&base)
            || (interpreter_family(base).is_some() && classify_bytes(b"", base).is_none()))
    })?;
    let candidate = if Path::new(arg).is_absolute() {
        PathBuf::from(arg)
    } else {
        workdir.join(arg)
    };
    candidate.is_file().then_some(candidate)
}

/// Normalizes a submission into a [`JobSpec`] with a fresh id. User files are
/// only read.
pub fn normalize_submission(raw_command: &str, options: &SubmissionOptions) -> Result<JobSpec> {
    let mut invocation = parse_invocation(raw_command, &options.extra_env)?;
    invocation.wrapper_scripts = options.wrapper_scripts.clone();
    let workdir = match &options.workdir {
        Some(dir) => dir.clone(),
        None => std::env::current_dir()?,
    };
    let entry_path = resolve_entry(&invocation.args, &workdir)
        .ok_or_else(|| SubmissionError::EntryNotFound(raw_command.to_string()))?;
    let workload_kind = classify_workload(&entry_path)?;

    if options.instance_type.is_some()
        && options.extra_constraints.as_ref().is_some_and(|c| !c.is_empty())
    {
        return Err(SubmissionError::ConflictingOverrides);
    }

    let mut aux_artifacts = Vec::new();
    let groups = [
        (ArtifactRole::SourceTree, &options.job_src),
        (ArtifactRole::Docs, &options.docs),
        (ArtifactRole::BuildFiles, &options.build_files),
        (ArtifactRole::EvidenceFile, &options.evidence),
    ];
    for (role, paths) in groups {
        for path in paths {
            let path = if path.is_absolute() { path.clone() } else { workdir.join(path) };
            if !path.exists() {
                return Err(SubmissionError::MissingArtifact(path));
            }
            aux_artifacts.push(AuxArtifact { role, path });
        }
    }
    // sibling evidence emitted by external tools: <entry>.dis, <entry>.cfg.json
    for suffix in [".dis", ".cfg.json"] {
        let mut sibling = entry_path.clone().into_os_string();
        sibling.push(suffix);
        let sibling = PathBuf::from(sibling);
        if sibling.is_file() && !aux_artifacts.iter().any(|a| a.path == sibling) {
            aux_artifacts.push(AuxArtifact {
                role: ArtifactRole::EvidenceFile,
                path: sibling,
            });
        }
    }
    for wrapper in &invocation.wrapper_scripts {
        if !wrapper.exists() {
            return Err(SubmissionError::MissingArtifact(wrapper.clone()));
        }
    }

    let history_refs = options
        .job_history
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<JobId>>>()?;

    let overrides = UserOverrides {
        ram_gb: options.ram_gb,
        cloud: options.cloud.clone(),
        instance_type: options.instance_type.clone(),
        extra_constraints: options.extra_constraints.clone(),
    };

    Ok(JobSpec {
        job_id: JobId::generate(),
        workload_kind,
        entry_path,
        invocation,
        aux_artifacts,
        user_overrides: (!overrides.is_empty()).then_some(overrides),
        history_refs,
    })
}

fn copy_readonly(src: &Path, dst: &Path) -> std::io::Result<()> {
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::copy(src, dst)?;
    let mut perms = fs::metadata(dst)?.permissions();
    perms.set_readonly(true);
    fs::set_permissions(dst, perms)
}

fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    if src.is_file() {
        return copy_readonly(src, dst);
    }
    for entry in walkdir::WalkDir::new(src).follow_links(false) {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(src).map_err(std::io::Error::other)?;
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            copy_readonly(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// Directory holding the staged snapshot of a job's artifacts.
pub fn artifact_dir(store_root: &Path, job_id: &JobId) -> PathBuf {
    store_root.join("jobs").join(job_id.as_str()).join("artifacts")
}

/// Copies the entry point and auxiliary artifacts into
/// `<store_root>/jobs/<job_id>/artifacts/` and returns the spec rewritten to
/// point at the snapshot.
pub fn stage_artifacts(spec: &JobSpec, store_root: &Path) -> Result<JobSpec> {
    let root = artifact_dir(store_root, &spec.job_id);
    let mut staged = spec.clone();

    let file_name = spec
        .entry_path
        .file_name()
        .ok_or_else(|| SubmissionError::MissingArtifact(spec.entry_path.clone()))?;
    let entry_dst = root.join("entry").join(file_name);
    copy_readonly(&spec.entry_path, &entry_dst)?;
    staged.entry_path = entry_dst;

    for (i, artifact) in staged.aux_artifacts.iter_mut().enumerate() {
        let name = artifact
            .path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_else(|| format!("artifact-{i}").into());
        let dst = if artifact.role == ArtifactRole::EvidenceFile {
            // evidence sits next to the staged entry so sibling lookup still works
            root.join("entry").join(&name)
        } else {
            root.join(artifact.role.dir_name()).join(&name)
        };
        copy_tree(&artifact.path, &dst)?;
        artifact.path = dst;
    }
    for wrapper in staged.invocation.wrapper_scripts.iter_mut() {
        if let Some(name) = wrapper.file_name() {
            let dst = root.join("wrappers").join(name);
            copy_readonly(wrapper, &dst)?;
            *wrapper = dst;
        }
    }
    Ok(staged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_leading_omp_assignment() {
        let ctx = parse_invocation("OMP_NUM_THREADS=16 ./cg.D.x", &BTreeMap::new()).unwrap();
        assert_eq!(ctx.env, env(&[("OMP_NUM_THREADS", "16")]));
        assert_eq!(ctx.args, vec!["./cg.D.x"]);
    }

    #[test]
    fn plain_command_has_no_env() {
        let ctx = parse_invocation("./a.out", &BTreeMap::new()).unwrap();
        assert!(ctx.env.is_empty());
        assert_eq!(ctx.args, vec!["./a.out"]);
    }

    #[test]
    fn later_assignment_wins_and_quotes_are_removed() {
        let ctx = parse_invocation(r#"A=1 A=2 ./x --f "a b""#, &BTreeMap::new()).unwrap();
        assert_eq!(ctx.env, env(&[("A", "2")]));
        assert_eq!(ctx.args, vec!["./x", "--f", "a b"]);
    }

    #[test]
    fn explicit_assignment_beats_extra_env() {
        let extra = env(&[("A", "x"), ("B", "y")]);
        let ctx = parse_invocation("A=1 ./run", &extra).unwrap();
        assert_eq!(ctx.env, env(&[("A", "1"), ("B", "y")]));
    }

    #[test]
    fn mid_command_assignments_stay_in_args() {
        let ctx = parse_invocation("./x FOO=1", &BTreeMap::new()).unwrap();
        assert!(ctx.env.is_empty());
        assert_eq!(ctx.args, vec!["./x", "FOO=1"]);
    }

    #[test]
    fn quoted_assignment_is_not_extracted() {
        let ctx = parse_invocation("'A=1' ./x", &BTreeMap::new()).unwrap();
        assert!(ctx.env.is_empty());
        assert_eq!(ctx.args, vec!["A=1", "./x"]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_invocation("   ", &BTreeMap::new()), Err(SubmissionError::EmptyCommand)));
        assert!(matches!(parse_invocation("A=1", &BTreeMap::new()), Err(SubmissionError::EmptyCommand)));
        assert!(matches!(
            parse_invocation("./x 'oops", &BTreeMap::new()),
            Err(SubmissionError::UnbalancedQuote)
        ));
        assert!(matches!(
            parse_invocation("./x \"oops", &BTreeMap::new()),
            Err(SubmissionError::UnbalancedQuote)
        ));
    }

    #[test]
    fn classification_priority() {
        let mut elf = ELF_MAGIC.to_vec();
        elf.extend_from_slice(b"#!/bin/bash");
        assert_eq!(classify_bytes(&elf, "x.sh"), Some(WorkloadKind::CompiledBinary));
        assert_eq!(
            classify_bytes(b"#!/usr/bin/env python3\nimport os\n", "run.sh"),
            Some(WorkloadKind::InterpretedEntryPoint)
        );
        assert_eq!(classify_bytes(b"#!/bin/bash\necho hi\n", "run.sh"), Some(WorkloadKind::ShellScript));
        assert_eq!(classify_bytes(b"#!/usr/bin/env -S bash -e\n", "run"), Some(WorkloadKind::ShellScript));
        assert_eq!(classify_bytes(b"#!/usr/bin/python3.11\n", "run"), Some(WorkloadKind::InterpretedEntryPoint));
        assert_eq!(classify_bytes(b"print(1)\n", "train.py"), Some(WorkloadKind::InterpretedEntryPoint));
        assert_eq!(classify_bytes(b"echo\n", "go.sh"), Some(WorkloadKind::ShellScript));
        assert_eq!(classify_bytes(b"\x00\x01", "blob.bin"), None);
    }

    #[test]
    fn classify_unreadable_file() {
        let err = classify_workload(Path::new("/nonexistent/definitely/not/here")).unwrap_err();
        assert!(matches!(err, SubmissionError::UnreadableFile { .. }));
    }

    #[test]
    fn job_ids_are_unique_and_sorted_across_threads() {
        let handles: Vec<_> = (0..8)
            .map(|_| std::thread::spawn(|| (0..500).map(|_| JobId::generate()).collect::<Vec<_>>()))
            .collect();
        let mut all: Vec<JobId> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        let a = JobId::generate();
        let b = JobId::generate();
        assert!(a < b);
    }

    #[test]
    fn job_id_syntax() {
        assert!(JobId::is_valid("18726"));
        assert!(JobId::is_valid("00001760000000000000"));
        assert!(!JobId::is_valid(""));
        assert!(!JobId::is_valid("../etc"));
        assert!(!JobId::is_valid("a b"));
    }

    #[test]
    fn flags_parse_history_and_ram() {
        let flags: BTreeMap<String, String> = [("job-history", "18726,18843"), ("ram", "32")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let opts = SubmissionOptions::from_flags(&flags).unwrap();
        assert_eq!(opts.job_history, vec!["18726", "18843"]);
        assert_eq!(opts.ram_gb, Some(32.0));

        let bad: BTreeMap<String, String> = [("ram".to_string(), "-4".to_string())].into();
        assert!(SubmissionOptions::from_flags(&bad).is_err());
    }
}
