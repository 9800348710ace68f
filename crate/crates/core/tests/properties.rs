use std::collections::BTreeMap;

use incisor_core::agent::{synthesize, AgentConfig, AgentError, SubtaskFindings};
use incisor_core::analysis::{EvidenceReport, FindingValue};
use incisor_core::catalog::{filter_feasible, parse_catalog, Catalog};
use incisor_core::constraints::{
    effective_instance_memory_gb, Confidence, ConstraintBundle, Dimension, IoIntensity, IsaFeature, Platform,
};
use incisor_core::executor::{parse_peak_memory, simulate_run, summarize_metrics, WorkloadProfile, SUMMARY_MAX_CHARS};
use incisor_core::selector::{rank_instances, score, PenaltyConfig, MAX_PREFERENCES};
use incisor_core::submission::parse_invocation;
use incisor_core::testkit::{cg_bundle, cg_profile, offer, synthetic_catalog};
use proptest::prelude::*;

fn bundle_strategy() -> impl Strategy<Value = ConstraintBundle> {
    (
        0.0f64..200.0,
        1u32..128,
        prop::sample::select(vec![Platform::X86_64, Platform::Any]),
        prop::sample::select(vec![
            vec![],
            vec![IsaFeature::Avx],
            vec![IsaFeature::Avx, IsaFeature::Avx2],
            vec![IsaFeature::Avx, IsaFeature::Avx2, IsaFeature::Avx512],
        ]),
        prop::sample::select(vec![IoIntensity::Minimal, IoIntensity::Moderate, IoIntensity::Heavy]),
        prop::sample::select(vec![Confidence::Low, Confidence::Medium, Confidence::High]),
        any::<bool>(),
    )
        .prop_map(|(mem, cpus, platform, isa, io, conf, gpu)| {
            let mut b = cg_bundle();
            b.mem_hwm_gb.value = mem;
            b.mem_hwm_gb.confidence = conf;
            b.cpu_count.value = cpus;
            b.platform.value = platform;
            b.isa_features.value = isa.into_iter().collect();
            b.io_intensity.value = io;
            b.gpu_required.value = gpu;
            b.gpu_count.value = u32::from(gpu);
            b.gpu_mem_gb.value = if gpu { 16.0 } else { 0.0 };
            b
        })
}

fn catalog() -> &'static Catalog {
    static CATALOG: std::sync::OnceLock<Catalog> = std::sync::OnceLock::new();
    CATALOG.get_or_init(synthetic_catalog)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_the_memory_estimate_never_adds_offers(b in bundle_strategy(), extra in 0.0f64..100.0) {
        let mut bigger = b.clone();
        bigger.mem_hwm_gb.value += extra;
        let small: Vec<_> = filter_feasible(catalog(), &b).into_iter().map(|o| o.name).collect();
        for o in filter_feasible(catalog(), &bigger) {
            prop_assert!(small.contains(&o.name));
        }
    }

    #[test]
    fn rankings_are_feasible_contiguous_and_never_below_price(b in bundle_strategy()) {
        let feasible = filter_feasible(catalog(), &b);
        match rank_instances(&feasible, &b) {
            Err(_) => prop_assert!(feasible.is_empty()),
            Ok(prefs) => {
                prop_assert!(!prefs.is_empty() && prefs.len() <= MAX_PREFERENCES);
                for (i, p) in prefs.iter().enumerate() {
                    prop_assert_eq!(p.rank, i + 1);
                    prop_assert!(p.offer.memory_gb >= effective_instance_memory_gb(&b));
                    prop_assert!(p.score >= p.offer.price_per_hour_usd);
                    prop_assert!(p.score <= p.offer.price_per_hour_usd * PenaltyConfig::default().max_product() * (1.0 + 1e-12));
                    prop_assert_eq!(p.score, score(&p.offer, &b, &PenaltyConfig::default()));
                }
                let mut names: Vec<_> = prefs.iter().map(|p| &p.offer.name).collect();
                names.dedup();
                prop_assert_eq!(names.len(), prefs.len());
            }
        }
    }

    #[test]
    fn synthesis_validates_or_reports_a_schema_violation(
        findings in prop::collection::vec(
            (
                prop::sample::select(Dimension::ALL.to_vec()),
                prop_oneof![
                    (-10.0f64..1e4).prop_map(FindingValue::Number),
                    prop::sample::select(vec![
                        "x86_64", "aarch64", "any", "sparc", "avx", "avx2,avx512", "true", "false", "maybe",
                        "minimal", "heavy", "12", "", "lots",
                    ]).prop_map(FindingValue::from),
                ],
                prop::sample::select(vec![Confidence::Low, Confidence::Medium, Confidence::High]),
                prop::sample::select(vec!["static", "history:measured:j1", "reasoner"]),
            ),
            0..12,
        )
    ) {
        let mut report = EvidenceReport::default();
        for (d, v, c, s) in findings {
            report.push(d, v, c, s, "fuzz");
        }
        let sub = SubtaskFindings { subtask_id: 1, report, ..SubtaskFindings::default() };
        match synthesize(&[sub], &AgentConfig::constraint_estimation()) {
            Ok(doc) => prop_assert!(ConstraintBundle::from_json(&doc).is_ok(), "{}", doc),
            Err(e) => prop_assert!(matches!(e, AgentError::SchemaViolation(_)), "{e}"),
        }
    }

    #[test]
    fn metrics_summaries_are_bounded_and_carry_the_peak(mem in 0.5f64..512.0, true_mem in 0.1f64..256.0, vcpus in 1u32..192) {
        let profile = WorkloadProfile { true_mem_hwm_gb: true_mem, ..cg_profile() };
        let out = simulate_run(&offer("p", mem, vcpus), &profile);
        let s = summarize_metrics(&out);
        prop_assert!(s.chars().count() <= SUMMARY_MAX_CHARS);
        let peak = parse_peak_memory(&s).unwrap();
        prop_assert!((peak - out.metrics.mem_peak_used_gb).abs() <= 0.005 + 1e-9);
        prop_assert!(peak <= mem + 0.005);
    }

    #[test]
    fn rendered_invocations_reparse_to_the_same_context(
        env in prop::collection::btree_map("[A-Z_]{1,8}", "[ -~]{0,12}", 0..4),
        args in prop::collection::vec("[ -~]{1,12}", 1..5),
    ) {
        let ctx0 = incisor_core::submission::InvocationContext {
            command: String::new(),
            args: args.clone(),
            env: env.clone(),
            wrapper_scripts: Vec::new(),
        };
        let rendered = ctx0.render();
        let ctx = parse_invocation(&rendered, &BTreeMap::new()).unwrap();
        prop_assert_eq!(&ctx.env, &env);
        // an argument shaped like NAME=value in first position would be read as env
        if !args[0].contains('=') {
            prop_assert_eq!(&ctx.args, &args);
        }
    }
}

#[test]
fn catalog_csv_round_trips() {
    let cat = synthetic_catalog();
    let back = parse_catalog(&cat.to_csv(), &cat.snapshot_label).unwrap();
    assert_eq!(back, cat);
}
