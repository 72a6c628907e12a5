//! Trains the sentence-domain classifier on synthetic cipher domains and
//! prints general-domain scores.

use rml_adapt::classifier::{train_classifier, ClassifierConfig};
use rml_adapt::corpus::{synthesize, SynthSpec, Vocabulary};

fn main() -> rml_adapt::Result<()> {
    let spec = SynthSpec { pairs_per_domain: 400, overlap: 0.3, ..SynthSpec::default() };
    let corpora = synthesize(&spec)?;
    let vocab = Vocabulary::build(&corpora, 5000)?;
    let data: Vec<(String, String)> = corpora
        .iter()
        .flat_map(|c| c.pairs.iter().map(move |(s, _)| (s.clone(), c.domain.clone())))
        .collect();
    let (clf, report) = train_classifier(&data, &corpora[0].domain, &vocab, &ClassifierConfig::default(), 1)?;
    println!("held-out accuracy {:.3} on {} sentences", report.heldout_accuracy, report.heldout);
    for c in &corpora {
        let ids: Vec<Vec<usize>> = c.pairs.iter().take(50).map(|(s, _)| vocab.encode(s)).collect();
        let scores = clf.score_all(&ids)?;
        println!("{:>8}: mean general-domain score {:.3}", c.domain, scores.iter().sum::<f64>() / scores.len() as f64);
    }
    Ok(())
}
