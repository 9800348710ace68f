use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn incisor(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incisor"))
        .args(args)
        .current_dir(cwd)
        .env_remove("INCISOR_STORE")
        .env_remove("INCISOR_CATALOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CG: &str = "OMP_NUM_THREADS=8 ./cg.D.x";

#[test]
fn cg_run_succeeds_and_is_recorded() {
    let store = tempfile::tempdir().unwrap();
    let s = store.path().to_str().unwrap();
    let out = incisor(&["run", CG, "--profile", "cg-d", "--store", s], &fixtures().join("cg"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("mem=16.00GB"), "{text}");
    assert!(text.contains("final status: success"));

    let hist = incisor(&["history", "--store", s], store.path());
    assert_eq!(hist.status.code(), Some(0));
    let line = stdout(&hist);
    assert!(line.contains("success"));
    let job_id = line.split_whitespace().next().unwrap().to_string();

    let explain = incisor(&["explain", &job_id, "--store", s], store.path());
    assert_eq!(explain.status.code(), Some(0));
    assert!(stdout(&explain).contains("OMP_NUM_THREADS=8"));
    assert!(stdout(&explain).contains("final status: success"));
    assert!(store.path().join("jobs").join(&job_id).join("logs/pipeline.log").is_file());
}

#[test]
fn dry_run_writes_nothing() {
    let root = tempfile::tempdir().unwrap();
    let store = root.path().join("store");
    let out = incisor(
        &["run", CG, "--dry-run", "--store", store.to_str().unwrap()],
        &fixtures().join("cg"),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("dry run"));
    assert!(!store.exists());
}

#[test]
fn nonexistent_instance_is_a_usage_error() {
    let store = tempfile::tempdir().unwrap();
    let out = incisor(
        &[
            "run",
            CG,
            "--profile",
            "cg-d",
            "--instance-type",
            "m99.nonexistent",
            "--store",
            store.path().to_str().unwrap(),
        ],
        &fixtures().join("cg"),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m99.nonexistent"));
}

#[test]
fn bad_flags_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(incisor(&["run"], dir.path()).status.code(), Some(2));
    assert_eq!(incisor(&["run", CG, "--ram", "-3", "--dry-run"], &fixtures().join("cg")).status.code(), Some(2));
    assert_eq!(incisor(&["run", "./missing.x", "--dry-run"], dir.path()).status.code(), Some(2));
}

#[test]
fn history_on_an_empty_store_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = incisor(&["history", "--store", dir.path().join("none").to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).trim().is_empty());
    let out = incisor(&["explain", "nope", "--store", dir.path().to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unavailable_top_choice_falls_through_and_is_explained() {
    let store = tempfile::tempdir().unwrap();
    let s = store.path().to_str().unwrap();
    let cg = fixtures().join("cg");
    let dry = incisor(&["run", CG, "--dry-run", "--json"], &cg);
    let doc: Value = serde_json::from_slice(&dry.stdout).unwrap();
    let top = &doc["pipeline"]["preferences"][0]["offer"];
    let key = format!("{}/{}", top["provider"].as_str().unwrap(), top["name"].as_str().unwrap());

    let out = incisor(&["run", CG, "--profile", "cg-d", "--store", s, "--unavailable", &key], &cg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let hist = stdout(&incisor(&["history", "--store", s], &cg));
    let job_id = hist.split_whitespace().next().unwrap();
    let explain = stdout(&incisor(&["explain", job_id, "--store", s], &cg));
    assert!(explain.contains(&format!("rank 1 {key} (21 GB): fail_provision_unavailable")), "{explain}");
    assert!(explain.contains("final status: success"));
}

#[test]
fn catalog_filter_counts_feasible_offers() {
    let dir = tempfile::tempdir().unwrap();
    let dry = incisor(&["run", CG, "--dry-run", "--json"], &fixtures().join("cg"));
    let doc: Value = serde_json::from_slice(&dry.stdout).unwrap();
    let bundle = dir.path().join("bundle.json");
    std::fs::write(&bundle, doc["pipeline"]["bundle"].to_string()).unwrap();

    let out = incisor(&["catalog", "--filter-bundle", bundle.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.lines().last().unwrap().starts_with("709 of 794 offers feasible"), "{}", text.lines().last().unwrap());

    let all = stdout(&incisor(&["catalog"], dir.path()));
    assert!(all.lines().last().unwrap().starts_with("794 of 794 offers"));
}

#[test]
fn json_costs_are_runtime_hours_times_price() {
    let store = tempfile::tempdir().unwrap();
    let out = incisor(
        &["run", CG, "--profile", "cg-d", "--json", "--store", store.path().to_str().unwrap()],
        &fixtures().join("cg"),
    );
    assert_eq!(out.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let mut total = 0.0;
    for (a, c) in doc["recovery"]["attempts"].as_array().unwrap().iter().zip(doc["costs"]["attempts"].as_array().unwrap()) {
        let expected = a["outcome"]["runtime_s"].as_f64().unwrap() / 3600.0 * a["offer"]["price_per_hour_usd"].as_f64().unwrap();
        assert!((c["cost_usd"].as_f64().unwrap() - expected).abs() < 1e-12);
        total += expected;
    }
    assert!((doc["costs"]["total_usd"].as_f64().unwrap() - total).abs() < 1e-12);
}

#[test]
fn oom_profile_recovers_on_a_larger_instance() {
    let store = tempfile::tempdir().unwrap();
    let out = incisor(
        &["run", CG, "--ram", "4", "--profile", "cg-d", "--json", "--store", store.path().to_str().unwrap()],
        &fixtures().join("cg"),
    );
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let attempts = doc["recovery"]["attempts"].as_array().unwrap();
    assert_eq!(attempts[0]["outcome"]["status"], "fail_oom");
    let first_mem = attempts[0]["offer"]["memory_gb"].as_f64().unwrap();
    if let Some(next) = attempts.get(1) {
        assert!(next["offer"]["memory_gb"].as_f64().unwrap() >= 2.0 * first_mem);
    }
    // everything passed over for being too small is logged with the reason
    for s in doc["recovery"]["skips"].as_array().unwrap() {
        assert!(s["reason"].as_str().unwrap().contains("out-of-memory"), "{s}");
    }
    assert_eq!(out.status.code(), Some(if doc["final_status"] == "success" { 0 } else { 1 }));
    assert!(!doc["recovery"]["skips"].as_array().unwrap().is_empty());

    // the record is persisted on exhaustion too, and explain shows why candidates were passed over
    let job_id = doc["job_id"].as_str().unwrap();
    let explain = incisor(&["explain", job_id, "--store", store.path().to_str().unwrap()], store.path());
    assert_eq!(explain.status.code(), Some(0));
    let text = stdout(&explain);
    assert!(text.contains("skipped") && text.contains("required after an out-of-memory failure"), "{text}");
    assert!(text.contains(&format!("final status: {}", doc["final_status"].as_str().unwrap())));
}

fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
                out.push((p, Vec::new()));
            } else {
                out.push((p.clone(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dry_run_leaves_an_existing_store_untouched() {
    let store = tempfile::tempdir().unwrap();
    let s = store.path().to_str().unwrap();
    let cg = fixtures().join("cg");
    assert_eq!(incisor(&["run", CG, "--profile", "cg-d", "--store", s], &cg).status.code(), Some(0));
    let before = snapshot(store.path());
    let out = incisor(&["run", CG, "--profile", "cg-d", "--dry-run", "--store", s], &cg);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(snapshot(store.path()), before);
}
