use proptest::prelude::*;
use rml_adapt::corpus::{synthesize, Provenance, SynthSpec, Vocabulary};
use rml_adapt::curriculum::{balance_task, manifest, parse_manifest, split_tasks, ScoredPair, SplitConfig, Strategy as Sampling};
use std::collections::VecDeque;

fn corpus_strategy() -> impl Strategy<Value = Vec<ScoredPair>> {
    prop::collection::vec(
        (0usize..4, 1usize..12, 1usize..12, 0u32..1000),
        1..300,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .map(|(domain, ls, lt, s)| ScoredPair {
                src: vec![4; ls],
                tgt: vec![5; lt],
                domain,
                score: Some(f64::from(s) / 1000.0),
            })
            .collect()
    })
}

fn config_strategy() -> impl Strategy<Value = SplitConfig> {
    (1usize..20, 20usize..400, 40usize..800, prop::bool::ANY).prop_map(|(n, sb, qb, balanced)| SplitConfig {
        n_tasks: n,
        support_token_budget: sb,
        query_token_budget: qb,
        strategy: if balanced { Sampling::Balanced } else { Sampling::TokenBased },
    })
}

fn tokens(pairs: &[ScoredPair]) -> usize {
    pairs.iter().map(ScoredPair::tokens).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn budgets_are_never_exceeded(pairs in corpus_strategy(), cfg in config_strategy()) {
        let out = split_tasks(&pairs, &cfg).unwrap();
        for t in &out.tasks {
            prop_assert!(tokens(&t.support) <= cfg.support_token_budget);
            prop_assert!(tokens(&t.query) <= cfg.query_token_budget);
        }
        let used: usize = out.tasks.iter().map(|t| t.support.len() + t.query.len()).sum();
        if used < pairs.len() {
            prop_assert!(!out.warnings.is_empty(), "dropped pairs must be reported");
        }
    }

    #[test]
    fn token_based_tasks_descend_in_score(pairs in corpus_strategy(), mut cfg in config_strategy()) {
        cfg.strategy = Sampling::TokenBased;
        cfg.support_token_budget = 100_000;
        cfg.query_token_budget = 200_000;
        let out = split_tasks(&pairs, &cfg).unwrap();
        prop_assert_eq!(out.tasks.len(), cfg.n_tasks.min(pairs.len()));
        prop_assert_eq!(out.tasks.iter().map(|t| t.pairs().count()).sum::<usize>(), pairs.len());
        for w in out.tasks.windows(2) {
            let lowest = w[0].pairs().map(|p| p.score.unwrap()).fold(f64::INFINITY, f64::min);
            let highest = w[1].pairs().map(|p| p.score.unwrap()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lowest >= highest, "task {} min {} < task {} max {}", w[0].index, lowest, w[1].index, highest);
        }
    }

    #[test]
    fn balanced_counts_differ_by_at_most_one(
        sizes in prop::collection::vec(5usize..60, 2..5),
        n_tasks in 1usize..8,
        seed in 0u64..1000,
    ) {
        let mut pairs = Vec::new();
        for (d, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                let s = ((seed.wrapping_mul(31) + (d * 97 + i * 13) as u64) % 1000) as f64 / 1000.0;
                pairs.push(ScoredPair { src: vec![4; 3], tgt: vec![5; 3], domain: d, score: Some(s) });
            }
        }
        let cfg = SplitConfig { n_tasks, support_token_budget: 100_000, query_token_budget: 200_000, strategy: Sampling::Balanced };
        let out = split_tasks(&pairs, &cfg).unwrap();
        for t in &out.tasks {
            let exhausted = out.warnings.iter().any(|w| w.starts_with(&format!("task {}:", t.index)) && w.contains("exhausted"));
            if exhausted {
                continue;
            }
            let mut counts = vec![0usize; sizes.len()];
            for p in t.pairs() {
                counts[p.domain] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "task {} counts {:?}", t.index, counts);
        }
    }
}

#[test]
fn default_budgets_match_the_reference_setting() {
    let cfg = SplitConfig::default();
    assert_eq!((cfg.support_token_budget, cfg.query_token_budget), (8000, 16000));
}

#[test]
fn exhausted_domain_is_refilled_with_a_warning() {
    let pair = |d: usize, s: f64| ScoredPair { src: vec![4], tgt: vec![5], domain: d, score: Some(s) };
    let mut pools = vec![
        VecDeque::from(vec![pair(0, 0.9)]),
        VecDeque::from(vec![pair(1, 0.8), pair(1, 0.7), pair(1, 0.6)]),
    ];
    let (chosen, warnings) = balance_task(&mut pools, 4, 1000);
    assert_eq!(chosen.len(), 4);
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("domain 0"));
}

#[test]
fn manifest_round_trips_real_tasks() {
    let spec = SynthSpec { domains: vec!["g".into(), "a".into()], pairs_per_domain: 60, ..Default::default() };
    let corpora = synthesize(&spec).unwrap();
    assert!(corpora.iter().all(|c| c.provenance == Provenance::Synthetic));
    let vocab = Vocabulary::build(&corpora, 1000).unwrap();
    let pairs: Vec<ScoredPair> = corpora
        .iter()
        .enumerate()
        .flat_map(|(d, c)| {
            let vocab = &vocab;
            c.pairs.iter().enumerate().map(move |(i, (s, t))| ScoredPair {
                src: vocab.encode(s),
                tgt: vocab.encode(t),
                domain: d,
                score: Some(1.0 / (1.0 + i as f64 + d as f64 * 0.37)),
            })
        })
        .collect();
    let names = vec!["g".to_string(), "a".to_string()];
    let out = split_tasks(&pairs, &SplitConfig { n_tasks: 7, ..Default::default() }).unwrap();
    let text = manifest(&out.tasks, &vocab, &names);
    assert_eq!(parse_manifest(&text, &vocab, &names).unwrap(), out.tasks);
}
