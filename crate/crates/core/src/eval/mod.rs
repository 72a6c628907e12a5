//! Decoding, BLEU/chrF and the cross-domain robustness matrix.

mod decode;
mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::MixTransformer;

pub use decode::{beam_decode, greedy_decode, BeamConfig, Hypothesis, StepModel};
pub use metrics::{bleu, chrf, sentence_chrf, CHRF_BETA, CHRF_ORDER};

/// Beam-decodes one source sentence. Decoding is capped at twice the
/// source length plus ten steps (and at `max_length`).
pub fn translate(model: &MixTransformer, src: &[usize], cfg: &BeamConfig) -> Result<Hypothesis> {
    let dec = model.decoder(src)?;
    let cfg = BeamConfig {
        max_length: cfg.max_length.min(2 * src.len() + 10),
        ..cfg.clone()
    };
    beam_decode(&dec, &cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub bleu: f64,
    pub chrf: f64,
    pub n_sentences: usize,
}

/// Translates every source sentence of `pairs` and scores against the
/// references.
pub fn evaluate(
    model: &MixTransformer,
    vocab: &Vocabulary,
    domain: &str,
    pairs: &[(String, String)],
    cfg: &BeamConfig,
) -> Result<DomainMetrics> {
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        let h = translate(model, &vocab.encode(src), cfg)?;
        hyps.push(vocab.decode(&h.tokens));
        refs.push(tgt.clone());
    }
    Ok(DomainMetrics {
        domain: domain.to_string(),
        bleu: bleu(&hyps, &refs)?,
        chrf: chrf(&hyps, &refs)?,
        n_sentences: pairs.len(),
    })
}

/// Cell `(J, i)`: BLEU of the model fine-tuned on domain `J`, evaluated
/// on domain `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMatrix {
    pub domains: Vec<String>,
    pub cells: Vec<Vec<f64>>,
    pub baseline: Vec<f64>,
    /// Mean over all cells of `cell − baseline[column]`.
    pub avg_diff: f64,
}

impl RobustnessMatrix {
    pub fn from_scores(domains: Vec<String>, cells: Vec<Vec<f64>>, baseline: Vec<f64>) -> Result<Self> {
        let k = domains.len();
        if k == 0 {
            return Err(Error::Empty("robustness domains"));
        }
        if cells.len() != k || cells.iter().any(|r| r.len() != k) || baseline.len() != k {
            return Err(Error::InvalidArgument(format!("robustness matrix must be {k}×{k} with {k} baseline scores")));
        }
        let sum: f64 = cells
            .iter()
            .flat_map(|row| row.iter().zip(&baseline).map(|(c, b)| c - b))
            .sum();
        Ok(RobustnessMatrix {
            domains,
            cells,
            baseline,
            avg_diff: sum / (k * k) as f64,
        })
    }

    /// Aligned text table followed by the average difference.
    pub fn pretty(&self) -> String {
        let mut s = format!("{:<12}", "model\\test");
        for d in &self.domains {
            let _ = write!(s, "{d:>10}");
        }
        s.push('\n');
        for (d, row) in self.domains.iter().zip(&self.cells) {
            let _ = write!(s, "{:<12}", format!("M_{d}"));
            for v in row {
                let _ = write!(s, "{v:>10.2}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<12}", "baseline");
        for v in &self.baseline {
            let _ = write!(s, "{v:>10.2}");
        }
        let _ = writeln!(s, "\navg_diff {:.4}", self.avg_diff);
        s
    }
}

/// Evaluates every fine-tuned model on every test set.
pub fn robustness_matrix(
    finetuned: &BTreeMap<String, MixTransformer>,
    tests: &BTreeMap<String, Vec<(String, String)>>,
    baseline: &MixTransformer,
    vocab: &Vocabulary,
    cfg: &BeamConfig,
) -> Result<RobustnessMatrix> {
    let domains: Vec<String> = tests.keys().cloned().collect();
    if finetuned.keys().ne(tests.keys()) {
        return Err(Error::InvalidArgument(format!(
            "fine-tuned models {:?} do not pair with test sets {:?}",
            finetuned.keys().collect::<Vec<_>>(),
            domains
        )));
    }
    let score = |m: &MixTransformer, d: &str| evaluate(m, vocab, d, &tests[d], cfg).map(|r| r.bleu);
    let baseline = domains.iter().map(|d| score(baseline, d)).collect::<Result<Vec<_>>>()?;
    let cells = domains
        .iter()
        .map(|j| domains.iter().map(|i| score(&finetuned[j], i)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    RobustnessMatrix::from_scores(domains, cells, baseline)
}
