//! Corpus BLEU and chrF on a few hand-made hypotheses.

use rml_adapt::eval::{bleu, chrf};

fn main() -> rml_adapt::Result<()> {
    let refs: Vec<String> = ["the cat sat on the mat", "a dog barked loudly"].map(String::from).to_vec();
    for hyps in [
        refs.clone(),
        ["the cat sat on a mat", "a dog barked"].map(String::from).to_vec(),
        ["mat the on sat cat the", "loudly barked dog a"].map(String::from).to_vec(),
    ] {
        println!("{hyps:?}\n  BLEU {:.2}  chrF {:.2}", bleu(&hyps, &refs)?, chrf(&hyps, &refs)?);
    }
    Ok(())
}
