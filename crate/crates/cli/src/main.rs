//! `incisor`: submit a job, estimate its hardware needs, pick an instance,
//! run it on the simulator and keep a record.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use incisor_core::agent::{run_pipeline, AgentError, PipelineOptions, Reasoner, RemoteReasoner, RuleBasedReasoner};
use incisor_core::catalog::{filter_feasible, load_catalog, parse_catalog, Catalog};
use incisor_core::constraints::ConstraintBundle;
use incisor_core::executor::{execute_with_recovery, Availability, ExecutorError, WorkloadProfile};
use incisor_core::records::{history_evidence_for, JobRecord, RecordsError, Store, STORE_ENV};
use incisor_core::similarity::{job_graphs, SimilarityParams};
use incisor_core::submission::{normalize_submission, stage_artifacts, SubmissionError, SubmissionOptions};
use serde_json::json;

const CATALOG_ENV: &str = "INCISOR_CATALOG";
const DEFAULT_STORE: &str = ".incisor";
const SHIPPED_CATALOG: &str = include_str!("../../../fixtures/catalog/synthetic-794.csv");
const SHIPPED_PROFILES: &[(&str, &str)] = &[
    ("cg-d", include_str!("../../../fixtures/profiles/cg-d.json")),
    ("gpu-train", include_str!("../../../fixtures/profiles/gpu-train.json")),
    ("py-analyze", include_str!("../../../fixtures/profiles/py-analyze.json")),
];

#[derive(Parser)]
#[command(name = "incisor", version, about = "Pick a cloud instance for a batch job before it ever runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate, select, run on the simulator and record a job.
    Run(RunArgs),
    /// List recorded jobs, newest first.
    History(StoreArgs),
    /// Show the full rationale and attempt log of a recorded job.
    Explain {
        job_id: String,
        #[command(flatten)]
        store: StoreArgs,
    },
    /// List catalog offers, optionally only those feasible for a bundle.
    Catalog(CatalogArgs),
}

#[derive(Args)]
struct StoreArgs {
    /// Record store root.
    #[arg(long, env = STORE_ENV)]
    store: Option<PathBuf>,
    /// Print JSON instead of the human report.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CatalogArgs {
    /// Catalog CSV (defaults to the shipped 794-offer synthetic catalog).
    #[arg(long, env = CATALOG_ENV)]
    catalog: Option<PathBuf>,
    /// Constraint bundle JSON; only feasible offers are listed.
    #[arg(long)]
    filter_bundle: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReasonerKind {
    Rules,
    Remote,
}

#[derive(Args)]
struct RunArgs {
    /// The command line as it would be typed, e.g. "OMP_NUM_THREADS=8 ./cg.D.x".
    run_command: String,
    /// Source trees of the job, comma separated.
    #[arg(long, value_delimiter = ',')]
    job_src: Vec<PathBuf>,
    /// Evidence files (listings, call graphs), comma separated.
    #[arg(long, value_delimiter = ',')]
    evidence: Vec<PathBuf>,
    /// Prior job ids to draw history from, comma separated.
    #[arg(long, value_delimiter = ',')]
    job_history: Vec<String>,
    /// Memory high water mark in GB, overriding the estimate.
    #[arg(long)]
    ram: Option<f64>,
    /// Restrict selection to one provider.
    #[arg(long)]
    cloud: Option<String>,
    /// Skip recommendation and use this instance type.
    #[arg(long)]
    instance_type: Option<String>,
    /// Workload profile for the simulator: a shipped name or a JSON path.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, value_enum, default_value = "rules")]
    reasoner: ReasonerKind,
    #[arg(long, env = CATALOG_ENV)]
    catalog: Option<PathBuf>,
    /// Stop after selection; nothing is run or written.
    #[arg(long)]
    dry_run: bool,
    /// Offers to treat as unavailable, as provider/name, comma separated.
    #[arg(long, value_delimiter = ',', hide = true)]
    unavailable: Vec<String>,
    #[command(flatten)]
    store: StoreArgs,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn failed(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

impl From<SubmissionError> for Failure {
    fn from(e: SubmissionError) -> Self {
        usage(e.to_string())
    }
}

impl From<RecordsError> for Failure {
    fn from(e: RecordsError) -> Self {
        failed(e.to_string())
    }
}

impl From<AgentError> for Failure {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::NonexistentInstance { .. } | AgentError::InvalidConfig(_) => usage(e.to_string()),
            _ => failed(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("INCISOR_LOG").unwrap_or_else(|_| "error".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::History(args) => cmd_history(args),
        Command::Explain { job_id, store } => cmd_explain(&job_id, store),
        Command::Catalog(args) => cmd_catalog(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("incisor: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn store_root(args: &StoreArgs) -> PathBuf {
    args.store.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
}

fn load_catalog_arg(path: Option<&Path>) -> Result<Catalog, Failure> {
    match path {
        Some(p) => load_catalog(p).map_err(|e| usage(format!("catalog {}: {e}", p.display()))),
        None => Ok(parse_catalog(SHIPPED_CATALOG, "synthetic-794").expect("shipped catalog parses")),
    }
}

fn load_profile(arg: &str) -> Result<WorkloadProfile, Failure> {
    if let Some((_, text)) = SHIPPED_PROFILES.iter().find(|(name, _)| *name == arg) {
        let p: WorkloadProfile = serde_json::from_str(text).expect("shipped profile parses");
        return Ok(p);
    }
    WorkloadProfile::load(Path::new(arg)).map_err(|e| {
        let names: Vec<&str> = SHIPPED_PROFILES.iter().map(|(n, _)| *n).collect();
        usage(format!("{e} (shipped profiles: {})", names.join(", ")))
    })
}

fn availability(unavailable: &[String], catalog: &Catalog) -> Result<Availability, Failure> {
    let mut a = Availability::all_available();
    for key in unavailable {
        let (provider, name) = key
            .split_once('/')
            .ok_or_else(|| usage(format!("--unavailable expects provider/name, got `{key}`")))?;
        match catalog.get(provider, name) {
            Some(o) => a.set(o, false),
            None => return Err(usage(format!("--unavailable: no offer {key}"))),
        }
    }
    Ok(a)
}

fn cmd_run(args: RunArgs) -> Result<u8, Failure> {
    if !args.dry_run && args.profile.is_none() {
        return Err(usage("--profile is required unless --dry-run is given"));
    }
    if let Some(ram) = args.ram {
        if !(ram.is_finite() && ram > 0.0) {
            return Err(usage(format!("--ram must be a positive number of GB, got {ram}")));
        }
    }
    let profile = args.profile.as_deref().map(load_profile).transpose()?;
    let catalog = load_catalog_arg(args.catalog.as_deref())?;
    let availability = availability(&args.unavailable, &catalog)?;

    let opts = SubmissionOptions {
        job_src: args.job_src.clone(),
        evidence: args.evidence.clone(),
        job_history: args.job_history.clone(),
        ram_gb: args.ram,
        cloud: args.cloud.clone(),
        instance_type: args.instance_type.clone(),
        ..SubmissionOptions::default()
    };
    let job = normalize_submission(&args.run_command, &opts)?;

    let root = store_root(&args.store);
    // a dry run must not create the store, so history is only read if it exists
    let store = if args.dry_run {
        root.join("jobs").is_dir().then(|| Store::open(&root)).transpose()?
    } else {
        Some(Store::open(&root)?)
    };
    let history = match &store {
        Some(s) => history_evidence_for(s, &job, &SimilarityParams::default())?,
        None => Vec::new(),
    };

    let mut reasoner: Box<dyn Reasoner> = match args.reasoner {
        ReasonerKind::Rules => Box::new(RuleBasedReasoner),
        ReasonerKind::Remote => Box::new(RemoteReasoner::from_env().map_err(|e| usage(e.to_string()))?),
    };
    let out = run_pipeline(&job, &catalog, history, reasoner.as_mut(), &PipelineOptions::default())?;

    if args.dry_run {
        if args.store.json {
            let doc = json!({"job_id": job.job_id, "dry_run": true, "pipeline": out});
            println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
        } else {
            print!("{}", report::pipeline(&job, &out));
            println!("dry run: nothing executed, nothing recorded");
        }
        return Ok(0);
    }

    let store = store.expect("opened above");
    let profile = profile.expect("checked above");
    let (recovery, exhausted) = match execute_with_recovery(&out.preferences, &profile, &availability) {
        Ok(r) => (r, false),
        Err(ExecutorError::AllCandidatesExhausted(r)) => (*r, true),
        Err(e) => return Err(usage(e.to_string())),
    };

    let staged = stage_artifacts(&job, store.root())?;
    let (exec, inv) = job_graphs(&job);
    let logs_dir = store.job_dir(job.job_id.as_str()).join("logs");
    write_logs(&logs_dir, &out.log, &out.transcript).map_err(|e| failed(format!("writing logs: {e}")))?;
    let mut notes = out.log.clone();
    if out.bypassed {
        notes.push("recommendation bypassed by --instance-type".into());
    }
    let record = JobRecord::from_run(&staged, &out.bundle, &out.preferences, &recovery, exec, inv, logs_dir, notes);
    let path = store.persist(&record)?;

    if args.store.json {
        let doc = json!({
            "job_id": job.job_id,
            "record": path,
            "pipeline": out,
            "recovery": recovery,
            "costs": report::costs(&recovery),
            "final_status": record.final_status,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
    } else {
        print!("{}", report::pipeline(&job, &out));
        print!("{}", report::execution(&recovery, &record));
        println!("record: {}", path.display());
    }
    Ok(if exhausted { 1 } else { 0 })
}

fn write_logs(dir: &Path, log: &[String], transcript: &[serde_json::Value]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = log.join("\n");
    text.push('\n');
    std::fs::write(dir.join("pipeline.log"), text)?;
    if !transcript.is_empty() {
        let t = serde_json::to_string_pretty(transcript).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("transcript.json"), t)?;
    }
    Ok(())
}

fn cmd_history(args: StoreArgs) -> Result<u8, Failure> {
    let root = store_root(&args);
    let headers = if root.join("jobs").is_dir() {
        Store::open(&root)?.list_history(None)?
    } else {
        Vec::new()
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&headers).expect("headers serialize"));
    } else {
        for h in &headers {
            let reason = h.failure_reason.as_deref().map(|r| format!("  ({r})")).unwrap_or_default();
            println!("{}  {}  {}{reason}", h.job_id, h.created_at.to_rfc3339(), h.final_status.as_str());
        }
    }
    Ok(0)
}

fn cmd_explain(job_id: &str, args: StoreArgs) -> Result<u8, Failure> {
    let root = store_root(&args);
    if !root.join("jobs").is_dir() {
        return Err(failed(format!("no store at {}", root.display())));
    }
    let record = Store::open(&root)?.load(job_id)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&record).expect("record serializes"));
    } else {
        print!("{}", report::explain(&record));
    }
    Ok(0)
}

fn cmd_catalog(args: CatalogArgs) -> Result<u8, Failure> {
    let catalog = load_catalog_arg(args.catalog.as_deref())?;
    let offers = match &args.filter_bundle {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let bundle =
                ConstraintBundle::from_json_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            filter_feasible(&catalog, &bundle)
        }
        None => catalog.offers.clone(),
    };
    if args.json {
        let doc = json!({"catalog": catalog.snapshot_label, "total": catalog.len(), "count": offers.len(), "offers": offers});
        println!("{}", serde_json::to_string_pretty(&doc).expect("offers serialize"));
        return Ok(0);
    }
    for o in &offers {
        println!("{}", report::offer_line(o));
    }
    let filter = if args.filter_bundle.is_some() { " feasible" } else { "" };
    println!("{} of {} offers{filter} ({})", offers.len(), catalog.len(), catalog.snapshot_label);
    Ok(0)
}
