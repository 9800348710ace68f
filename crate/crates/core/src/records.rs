//! Durable job records under a plain directory tree:
//!
//! ```text
//! <store>/.lock
//! <store>/index.jsonl
//! <store>/jobs/<job_id>/record.json
//! ```
//!
//! Writes go to a temporary file that is renamed into place while holding
//! the store lock, so readers never observe a partial record.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use fs2::FileExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::ConstraintBundle;
use crate::executor::{truncate_chars, RecoveryReport, RunStatus, Skip, SUMMARY_MAX_CHARS};
use crate::selector::InstancePreference;
use crate::similarity::{find_similar_jobs, job_graphs, EvidenceGraph, HistoryCandidate, MatchOutcome, SimilarityParams};
use crate::submission::{JobId, JobSpec};

pub const RECORD_SCHEMA: &str = "job-record/1";
pub const STORE_ENV: &str = "INCISOR_STORE";
const RECORD_FILE: &str = "record.json";
const INDEX_FILE: &str = "index.jsonl";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("store {path} is not writable: {source}")]
    StoreUnwritable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("job {0} already has a record")]
    DuplicateJobId(String),
    #[error("no record for job {0}")]
    NotFound(String),
    #[error("corrupt record {path}: {message}")]
    Corrupt { path: String, message: String },
}

type Result<T> = std::result::Result<T, RecordsError>;

fn unwritable(path: &Path) -> impl FnOnce(std::io::Error) -> RecordsError + '_ {
    move |source| RecordsError::StoreUnwritable {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptEntry {
    pub rank: usize,
    pub provider: String,
    pub offer_name: String,
    pub memory_gb: f64,
    pub price_per_hour_usd: f64,
    pub status: RunStatus,
    pub exit_code: i32,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub schema: String,
    pub job_id: JobId,
    pub spec_snapshot: JobSpec,
    pub bundle: ConstraintBundle,
    pub preferences: Vec<InstancePreference>,
    pub attempts: Vec<AttemptEntry>,
    #[serde(default)]
    pub skips: Vec<Skip>,
    pub final_status: RunStatus,
    pub metrics_summary: String,
    pub exec_graph: EvidenceGraph,
    pub inv_graph: EvidenceGraph,
    pub created_at: DateTime<Utc>,
    pub logs_path: PathBuf,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl JobRecord {
    /// Assembles a record from a finished recovery run.
    #[allow(clippy::too_many_arguments)]
    pub fn from_run(
        spec: &JobSpec,
        bundle: &ConstraintBundle,
        preferences: &[InstancePreference],
        report: &RecoveryReport,
        exec_graph: EvidenceGraph,
        inv_graph: EvidenceGraph,
        logs_path: PathBuf,
        notes: Vec<String>,
    ) -> JobRecord {
        let attempts: Vec<AttemptEntry> = report
            .attempts
            .iter()
            .map(|a| AttemptEntry {
                rank: a.rank,
                provider: a.offer.provider.clone(),
                offer_name: a.offer.name.clone(),
                memory_gb: a.offer.memory_gb,
                price_per_hour_usd: a.offer.price_per_hour_usd,
                status: a.outcome.status,
                exit_code: a.outcome.exit_code,
                runtime_s: a.outcome.runtime_s,
            })
            .collect();
        let last_run = report
            .attempts
            .iter()
            .rev()
            .find(|a| a.outcome.status != RunStatus::FailProvisionUnavailable);
        let final_status = report
            .attempts
            .last()
            .map(|a| a.outcome.status)
            .unwrap_or(RunStatus::FailProvisionUnavailable);
        JobRecord {
            schema: RECORD_SCHEMA.to_string(),
            job_id: spec.job_id.clone(),
            spec_snapshot: spec.clone(),
            bundle: bundle.clone(),
            preferences: preferences.to_vec(),
            attempts,
            skips: report.skips.clone(),
            final_status,
            metrics_summary: last_run
                .map(|a| crate::executor::summarize_metrics(&a.outcome))
                .unwrap_or_default(),
            exec_graph,
            inv_graph,
            created_at: Utc::now(),
            logs_path,
            notes,
        }
    }

    /// Reason string for the final failure, if the job failed.
    pub fn failure_reason(&self) -> Option<String> {
        if self.final_status == RunStatus::Success {
            return None;
        }
        let a = self.attempts.last()?;
        Some(format!("{} on {} ({} GB)", a.status.as_str(), a.offer_name, a.memory_gb))
    }

    /// Capacity of the largest instance that ran out of memory.
    pub fn largest_oom_memory_gb(&self) -> Option<f64> {
        self.attempts
            .iter()
            .filter(|a| a.status == RunStatus::FailOom)
            .map(|a| a.memory_gb)
            .max_by(f64::total_cmp)
    }

    pub fn header(&self) -> RecordHeader {
        RecordHeader {
            job_id: self.job_id.to_string(),
            created_at: self.created_at,
            final_status: self.final_status,
            failure_reason: self.failure_reason(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.schema != RECORD_SCHEMA {
            return Err(format!("schema `{}`", self.schema));
        }
        if let Some(last) = self.attempts.last() {
            if last.status != self.final_status {
                return Err("final_status disagrees with the last attempt".into());
            }
        }
        if self.metrics_summary.chars().count() > SUMMARY_MAX_CHARS {
            return Err("metrics summary exceeds the size bound".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub job_id: String,
    pub created_at: DateTime<Utc>,
    pub final_status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// A record written to a temporary file but not yet visible.
#[derive(Debug)]
pub struct StagedWrite<'a> {
    store: &'a Store,
    job_id: String,
    tmp: PathBuf,
    header: RecordHeader,
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store> {
        let root = root.into();
        fs::create_dir_all(root.join("jobs")).map_err(unwritable(&root))?;
        Ok(Store { root })
    }

    /// Root from [`STORE_ENV`], if set.
    pub fn env_root() -> Option<PathBuf> {
        std::env::var_os(STORE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, job_id: &str) -> PathBuf {
        self.root.join("jobs").join(job_id)
    }

    fn record_path(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join(RECORD_FILE)
    }

    fn lock(&self) -> Result<File> {
        let path = self.root.join(LOCK_FILE);
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(unwritable(&path))?;
        f.lock_exclusive().map_err(unwritable(&path))?;
        Ok(f)
    }

    /// Writes the record to a temporary file in its job directory.
    pub fn stage(&self, record: &JobRecord) -> Result<StagedWrite<'_>> {
        record.validate().map_err(|message| RecordsError::Corrupt {
            path: record.job_id.to_string(),
            message,
        })?;
        let id = record.job_id.to_string();
        if self.record_path(&id).exists() {
            return Err(RecordsError::DuplicateJobId(id));
        }
        let dir = self.job_dir(&id);
        fs::create_dir_all(&dir).map_err(unwritable(&dir))?;
        let tmp = dir.join(format!("{RECORD_FILE}.tmp-{}", std::process::id()));
        let body = serde_json::to_vec_pretty(record).expect("records serialize");
        let mut f = File::create(&tmp).map_err(unwritable(&tmp))?;
        f.write_all(&body).map_err(unwritable(&tmp))?;
        f.sync_all().map_err(unwritable(&tmp))?;
        Ok(StagedWrite {
            store: self,
            job_id: id,
            tmp,
            header: record.header(),
        })
    }

    pub fn persist(&self, record: &JobRecord) -> Result<PathBuf> {
        self.stage(record)?.commit()
    }

    pub fn load(&self, job_id: &str) -> Result<JobRecord> {
        if !JobId::is_valid(job_id) {
            return Err(RecordsError::NotFound(job_id.to_string()));
        }
        let path = self.record_path(job_id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(RecordsError::NotFound(job_id.to_string())),
            Err(e) => {
                return Err(RecordsError::Corrupt {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            }
        };
        serde_json::from_str(&text).map_err(|e| RecordsError::Corrupt {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn read_index(&self) -> Vec<RecordHeader> {
        let Ok(f) = File::open(self.root.join(INDEX_FILE)) else {
            return Vec::new();
        };
        BufReader::new(f)
            .lines()
            .map_while(std::result::Result::ok)
            .filter_map(|l| serde_json::from_str(&l).ok())
            .collect()
    }

    /// Headers newest first. Index entries without a record on disk are
    /// ignored; records missing from the index trigger a rebuild.
    pub fn list_history(&self, filter: Option<&dyn Fn(&RecordHeader) -> bool>) -> Result<Vec<RecordHeader>> {
        let mut headers: Vec<RecordHeader> = self
            .read_index()
            .into_iter()
            .filter(|h| self.record_path(&h.job_id).is_file())
            .collect();
        headers.sort_by(|a, b| a.job_id.cmp(&b.job_id));
        headers.dedup_by(|a, b| a.job_id == b.job_id);
        if headers.len() != self.record_ids()?.len() {
            headers = self.rebuild_index()?;
        }
        headers.retain(|h| filter.is_none_or(|f| f(h)));
        headers.sort_by(|a, b| b.created_at.cmp(&a.created_at).then(b.job_id.cmp(&a.job_id)));
        Ok(headers)
    }

    fn record_ids(&self) -> Result<Vec<String>> {
        let jobs = self.root.join("jobs");
        let entries = match fs::read_dir(&jobs) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(unwritable(&jobs)(e)),
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(RECORD_FILE).is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Rewrites the index from the records on disk.
    pub fn rebuild_index(&self) -> Result<Vec<RecordHeader>> {
        let _lock = self.lock()?;
        let mut headers = Vec::new();
        for id in self.record_ids()? {
            headers.push(self.load(&id)?.header());
        }
        let path = self.root.join(INDEX_FILE);
        let tmp = self.root.join(format!("{INDEX_FILE}.tmp-{}", std::process::id()));
        let mut body = String::new();
        for h in &headers {
            body.push_str(&serde_json::to_string(h).expect("headers serialize"));
            body.push('\n');
        }
        fs::write(&tmp, body).map_err(unwritable(&tmp))?;
        fs::rename(&tmp, &path).map_err(unwritable(&path))?;
        Ok(headers)
    }

    pub fn load_all(&self) -> Result<Vec<JobRecord>> {
        self.record_ids()?.iter().map(|id| self.load(id)).collect()
    }
}

impl StagedWrite<'_> {
    /// Makes the staged record visible and appends it to the index.
    pub fn commit(self) -> Result<PathBuf> {
        let _lock = self.store.lock()?;
        let dest = self.store.record_path(&self.job_id);
        if dest.exists() {
            let _ = fs::remove_file(&self.tmp);
            return Err(RecordsError::DuplicateJobId(self.job_id.clone()));
        }
        fs::rename(&self.tmp, &dest).map_err(unwritable(&dest))?;
        let index = self.store.root.join(INDEX_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index)
            .map_err(unwritable(&index))?;
        let mut line = serde_json::to_string(&self.header).expect("headers serialize");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(unwritable(&index))?;
        Ok(dest)
    }

    /// Simulates a crash before the rename: the temporary file is left on
    /// disk and nothing becomes visible.
    pub fn abandon(self) -> PathBuf {
        self.tmp
    }
}

/// One matched prior run, as handed to the constraint-estimation agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvidence {
    pub job_id: String,
    pub outcome: MatchOutcome,
    pub executable_score: f64,
    pub invocation_score: f64,
    /// Peak memory measured by the last run that got going.
    pub measured_peak_gb: Option<f64>,
    pub largest_oom_memory_gb: Option<f64>,
    pub text: String,
}

/// Evidence from prior runs similar to `job`. When the job names history
/// explicitly, only those records are considered.
pub fn history_evidence_for(store: &Store, job: &JobSpec, params: &SimilarityParams) -> Result<Vec<HistoryEvidence>> {
    let (exec, inv) = job_graphs(job);
    let mut records = store.load_all()?;
    records.retain(|r| r.job_id != job.job_id);
    if !job.history_refs.is_empty() {
        records.retain(|r| job.history_refs.contains(&r.job_id));
    }
    Ok(history_evidence(&exec, &inv, &records, params))
}

pub fn history_evidence(
    exec: &EvidenceGraph,
    inv: &EvidenceGraph,
    records: &[JobRecord],
    params: &SimilarityParams,
) -> Vec<HistoryEvidence> {
    let candidates: Vec<HistoryCandidate<'_>> = records
        .iter()
        .map(|r| HistoryCandidate {
            job_id: r.job_id.as_str(),
            created_at: r.created_at,
            outcome: match r.failure_reason() {
                None => MatchOutcome::Success,
                Some(reason) => MatchOutcome::Failure { reason },
            },
            exec_graph: &r.exec_graph,
            inv_graph: &r.inv_graph,
        })
        .collect();
    find_similar_jobs(exec, inv, &candidates, params)
        .into_iter()
        .filter_map(|m| {
            let r = records.iter().find(|r| r.job_id.as_str() == m.job_id)?;
            Some(evidence_from(r, m))
        })
        .collect()
}

fn evidence_from(r: &JobRecord, m: crate::similarity::SimilarityMatch) -> HistoryEvidence {
    let measured_peak_gb = crate::executor::parse_peak_memory(&r.metrics_summary);
    let mut text = format!(
        "prior job {} ({}) executable similarity {:.3}, invocation similarity {:.3}\n",
        r.job_id,
        match &m.outcome {
            MatchOutcome::Success => "success".to_string(),
            MatchOutcome::Failure { reason } => format!("failure: {reason}"),
        },
        m.executable_score,
        m.invocation_score
    );
    for a in &r.attempts {
        text.push_str(&format!(
            "attempt rank {} {} {} GB: {} exit={}\n",
            a.rank,
            a.offer_name,
            a.memory_gb,
            a.status.as_str(),
            a.exit_code
        ));
    }
    text.push_str(&r.metrics_summary);
    HistoryEvidence {
        job_id: m.job_id,
        outcome: m.outcome,
        executable_score: m.executable_score,
        invocation_score: m.invocation_score,
        measured_peak_gb: if r.final_status == RunStatus::Success { measured_peak_gb } else { None },
        largest_oom_memory_gb: r.largest_oom_memory_gb(),
        text: truncate_chars(text, SUMMARY_MAX_CHARS),
    }
}
