//! Splits scored pairs into curriculum tasks, token-based and balanced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rml_adapt::curriculum::{split_tasks, ScoredPair, SplitConfig, Strategy};

fn main() -> rml_adapt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pairs: Vec<ScoredPair> = (0..400)
        .map(|_| ScoredPair {
            src: vec![4; rng.gen_range(3..12)],
            tgt: vec![5; rng.gen_range(3..12)],
            domain: rng.gen_range(0..4),
            score: Some(rng.gen_range(0.0..1.0)),
        })
        .collect();
    for strategy in [Strategy::TokenBased, Strategy::Balanced] {
        let cfg = SplitConfig { n_tasks: 5, support_token_budget: 800, query_token_budget: 1600, strategy };
        let out = split_tasks(&pairs, &cfg)?;
        println!("{strategy:?}");
        for t in &out.tasks {
            let mut per_domain = [0usize; 4];
            t.pairs().for_each(|p| per_domain[p.domain] += 1);
            let top = t.pairs().map(|p| p.score.unwrap()).fold(f64::MIN, f64::max);
            println!("  task {}: support {} query {} per-domain {per_domain:?} best score {top:.3}", t.index, t.support.len(), t.query.len());
        }
        for w in &out.warnings {
            println!("  warning: {w}");
        }
    }
    Ok(())
}
