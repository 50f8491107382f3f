use std::collections::BTreeSet;

use deconfound_core::eval::{encode_ids, evaluate_scorer, BiasProbeReport, EvalReport, ProbeRow, RandomScorer};
use deconfound_core::ood::{
    build_bias_probes, build_vcr_ood_qa, passes_co_occurrence_filter, random_split, KeepPolicy, SplitConfig, SplitResult,
};
use deconfound_core::synth::{generate, SynthConfig};
use deconfound_core::text::TextAnalyzer;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn qa_split_invariants(seed in 0u64..1000, n in 300usize..900, rho in 0.0f64..1.0, target in 50usize..400) {
        let corpus = generate(&SynthConfig { n_samples: n, rho_cooc: rho, rationale_cooc: Some(0.0), seed, ..Default::default() }).unwrap();
        let an = TextAnalyzer::default();
        let cfg = SplitConfig { seed, train_target: target, ..Default::default() };
        let Ok(s) = build_vcr_ood_qa(&corpus, &cfg, &an) else { return Ok(()) };
        prop_assert!(s.train_ids.is_disjoint(&s.val_ids));
        prop_assert!(s.train_ids.is_disjoint(&s.id_holdout_ids));
        prop_assert!(s.val_ids.is_disjoint(&s.id_holdout_ids));
        prop_assert_eq!(s.train_ids.len() + s.val_ids.len() + s.id_holdout_ids.len(), corpus.len());
        prop_assert!(s.train_ids.len() <= target);
        for id in &s.val_ids {
            prop_assert!(passes_co_occurrence_filter(corpus.get(id).unwrap(), &an));
        }
        for st in s.stats.categories.values() {
            prop_assert_eq!(st.kept_tail, st.tail);
            if let Some(a) = st.alpha {
                prop_assert!(st.kept_head as u64 <= a);
            }
        }
        prop_assert_eq!(build_vcr_ood_qa(&corpus, &cfg, &an).unwrap(), s);
    }
}

#[test]
fn keep_all_retains_every_filtered_sample() {
    let corpus = generate(&SynthConfig { n_samples: 800, rationale_cooc: Some(0.0), ..Default::default() }).unwrap();
    let an = TextAnalyzer::default();
    let s = build_vcr_ood_qa(&corpus, &SplitConfig { train_target: 100, keep_policy: KeepPolicy::KeepAll, ..Default::default() }, &an)
        .unwrap();
    assert_eq!(s.val_ids.len(), s.stats.filtered_size);
}

#[test]
fn random_scorer_is_near_chance() {
    let corpus = generate(&SynthConfig { n_samples: 4000, ..Default::default() }).unwrap();
    let ids: BTreeSet<String> = corpus.samples().iter().map(|s| s.id.clone()).collect();
    let enc = encode_ids(&corpus, corpus.vocab(), &ids).unwrap();
    let r = evaluate_scorer(&RandomScorer::new(7), &enc).unwrap();
    // 4000 Bernoulli(1/4) trials: sd ≈ 0.68 points, so 4 points is ~6 sd
    assert!((r.q_to_a - 25.0).abs() < 4.0, "{r:?}");
    assert!((r.qa_to_r - 25.0).abs() < 4.0, "{r:?}");
    assert!((r.q_to_ar - 6.25).abs() < 2.5, "{r:?}");
    assert_eq!(evaluate_scorer(&RandomScorer::new(7), &enc).unwrap(), r);
}

#[test]
fn probes_partition_the_corpus() {
    let corpus = generate(&SynthConfig { n_samples: 1000, ..Default::default() }).unwrap();
    let p = build_bias_probes(&corpus, &TextAnalyzer::default());
    assert_eq!(p.cooc.len() + p.non_cooc.len(), corpus.len());
    assert!(p.cooc.is_disjoint(&p.non_cooc));
    assert_eq!(p.head.len() + p.tail.len(), corpus.len());
    let split = random_split(&corpus, 600, 1).unwrap();
    let r = p.restrict(&split.val_ids);
    assert_eq!(r.cooc.len() + r.non_cooc.len(), 400);
}

#[test]
fn reports_round_trip_through_json() {
    let r = EvalReport { count: 3, q_to_a: 66.5, qa_to_r: 33.25, q_to_ar: 0.0, config_hash: Some("ab".into()), seed: Some(4) };
    assert_eq!(serde_json::from_str::<EvalReport>(&serde_json::to_string(&r).unwrap()).unwrap(), r);
    let p = BiasProbeReport {
        cooc: Some(ProbeRow { count: 2, q_to_a: 50.0, qa_to_r: Some(100.0) }),
        non_cooc: None,
        head: Some(ProbeRow { count: 1, q_to_a: 0.0, qa_to_r: None }),
        tail: None,
    };
    assert_eq!(serde_json::from_str::<BiasProbeReport>(&serde_json::to_string(&p).unwrap()).unwrap(), p);
    let corpus = generate(&SynthConfig { n_samples: 300, ..Default::default() }).unwrap();
    let s = random_split(&corpus, 100, 0).unwrap();
    assert_eq!(serde_json::from_str::<SplitResult>(&serde_json::to_string(&s).unwrap()).unwrap(), s);
}
