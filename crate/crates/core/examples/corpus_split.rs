//! Synthesizes cipher domains, builds a vocabulary and carves the
//! meta-learning split.

use rml_adapt::corpus::{make_meta_split, synthesize, SplitSizes, SynthSpec, Vocabulary};

fn main() -> rml_adapt::Result<()> {
    let spec = SynthSpec { pairs_per_domain: 300, ..SynthSpec::default() };
    let corpora = synthesize(&spec)?;
    for c in &corpora {
        println!("{:>8}: {} pairs, e.g. {:?}", c.domain, c.pairs.len(), c.pairs[0]);
    }
    let seen: Vec<String> = spec.domains[..4].to_vec();
    let sizes = SplitSizes { meta_train: 120, test_support: 40, test_query: 80, dev_cap: 20 };
    let split = make_meta_split(&corpora, &seen, &sizes, 7)?;
    for (d, s) in &split.meta_test {
        let train = split.meta_train.get(d).map_or(0, |m| m.support.len() + m.query.len());
        println!("{d:>8}: meta-train {train}, meta-test {} support / {} query", s.support.len(), s.query.len());
    }
    let vocab = Vocabulary::build(&corpora, 1000)?;
    let first = &corpora[0].pairs[0].0;
    println!("vocabulary {} types; {first:?} → {:?}", vocab.len(), vocab.encode(first));
    Ok(())
}
