//! Sentence-domain classifier: averaged word embeddings, one ReLU layer and
//! a softmax over domain labels. Its probability of the general domain is
//! the curriculum score.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Tensor, Var};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Checkpoint, ParamSet};
use crate::train::{Adam, Batcher};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScheme {
    /// General vs. everything else.
    TwoLabel,
    /// One label per corpus domain.
    ManyLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub scheme: LabelScheme,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            scheme: LabelScheme::ManyLabel,
            embed_dim: 32,
            hidden_dim: 32,
            epochs: 4,
            batch_size: 32,
            lr: 5e-3,
        }
    }
}

/// Label `0` is always the general domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceClassifier {
    pub labels: Vec<String>,
    pub scheme: LabelScheme,
    params: ParamSet,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifierReport {
    /// Training sentences per label after any label merge.
    pub label_counts: BTreeMap<String, usize>,
    pub heldout: usize,
    pub heldout_accuracy: f64,
    pub epoch_loss: Vec<f64>,
}

const EMBED: usize = 0;
const HIDDEN_W: usize = 1;
const HIDDEN_B: usize = 2;
const OUT_W: usize = 3;
const OUT_B: usize = 4;

impl SentenceClassifier {
    pub fn new(labels: Vec<String>, scheme: LabelScheme, vocab_size: usize, cfg: &ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push("embed", xavier_uniform(&mut rng, vocab_size, cfg.embed_dim));
        params.push("hidden.w", xavier_uniform(&mut rng, cfg.embed_dim, cfg.hidden_dim));
        params.push("hidden.b", Tensor::zeros(&[cfg.hidden_dim]));
        params.push("out.w", xavier_uniform(&mut rng, cfg.hidden_dim, labels.len()));
        params.push("out.b", Tensor::zeros(&[labels.len()]));
        SentenceClassifier { labels, scheme, params }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn logits_on_tape(&self, tape: &mut Tape, p: &[Var], sentences: &[&[usize]]) -> Result<Var> {
        let ids: Vec<usize> = sentences.iter().flat_map(|s| s.iter().copied()).collect();
        let mut avg = vec![0.0; sentences.len() * ids.len()];
        let mut offset = 0;
        for (i, s) in sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Empty("sentence"));
            }
            for j in offset..offset + s.len() {
                avg[i * ids.len() + j] = 1.0 / s.len() as f64;
            }
            offset += s.len();
        }
        let avg = tape.constant(Tensor::matrix(sentences.len(), ids.len(), avg)?)?;
        let e = tape.embedding(p[EMBED], &ids)?;
        let h = tape.matmul(avg, e)?;
        let h = tape.matmul(h, p[HIDDEN_W])?;
        let h = tape.add_row(h, p[HIDDEN_B])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, p[OUT_W])?;
        tape.add_row(o, p[OUT_B])
    }

    /// Label distribution for each sentence (token ids).
    pub fn predict_batch(&self, sentences: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape)?;
        let logits = self.logits_on_tape(&mut tape, &p, sentences)?;
        let probs = softmax_rows(tape.value(logits));
        Ok(probs.data().chunks(self.num_labels()).map(<[f64]>::to_vec).collect())
    }

    pub fn predict(&self, sentence: &[usize]) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[sentence])?.remove(0))
    }

    /// Probability of the general-domain label.
    pub fn score(&self, sentence: &[usize]) -> Result<f64> {
        Ok(self.predict(sentence)?[0])
    }

    /// Scores in chunks of 256 sentences.
    pub fn score_all(&self, sentences: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(256) {
            let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            out.extend(self.predict_batch(&refs)?.into_iter().map(|p| p[0]));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, vocab_hash: &str) -> Checkpoint {
        Checkpoint {
            kind: "domain-classifier".into(),
            meta: serde_json::json!({
                "labels": self.labels,
                "scheme": self.scheme,
                "vocab_hash": vocab_hash,
            }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, String)> {
        if ck.kind != "domain-classifier" {
            return Err(Error::Checkpoint(format!("expected domain-classifier, found {}", ck.kind)));
        }
        let labels: Vec<String> = serde_json::from_value(ck.meta["labels"].clone())?;
        let scheme: LabelScheme = serde_json::from_value(ck.meta["scheme"].clone())?;
        let hash = ck.meta["vocab_hash"].as_str().unwrap_or_default().to_string();
        let names = ["embed", "hidden.w", "hidden.b", "out.w", "out.b"];
        if ck.params.names() != names || ck.params.get(OUT_B).numel() != labels.len() {
            return Err(Error::Checkpoint("classifier parameter layout mismatch".into()));
        }
        Ok((SentenceClassifier { labels, scheme, params: ck.params }, hash))
    }
}

/// Maps corpus domains to classifier labels.
fn label_table(domains: &[&str], general: &str, scheme: LabelScheme) -> Result<(Vec<String>, BTreeMap<String, usize>)> {
    let mut distinct: Vec<&str> = domains.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "classifier needs at least two domains, found {}",
            distinct.len()
        )));
    }
    if !distinct.contains(&general) {
        return Err(Error::InvalidArgument(format!("general domain `{general}` has no sentences")));
    }
    let mut map = BTreeMap::new();
    let labels = match scheme {
        LabelScheme::TwoLabel => {
            for d in &distinct {
                map.insert(d.to_string(), usize::from(*d != general));
            }
            vec![general.to_string(), "in-domain".to_string()]
        }
        LabelScheme::ManyLabel => {
            let mut labels = vec![general.to_string()];
            labels.extend(distinct.iter().filter(|d| **d != general).map(|d| d.to_string()));
            for (i, l) in labels.iter().enumerate() {
                map.insert(l.clone(), i);
            }
            labels
        }
    };
    Ok((labels, map))
}

/// Trains on `(sentence, domain)` pairs. The input is canonicalised by
/// sorting, so its order never affects the result; 10% of every label is
/// held out for the accuracy report.
pub fn train_classifier(
    corpus: &[(String, String)],
    general: &str,
    vocab: &Vocabulary,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(SentenceClassifier, ClassifierReport)> {
    if corpus.is_empty() {
        return Err(Error::Empty("classifier corpus"));
    }
    let domains: Vec<&str> = corpus.iter().map(|(_, d)| d.as_str()).collect();
    let (labels, map) = label_table(&domains, general, cfg.scheme)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_label: Vec<Vec<Vec<usize>>> = vec![Vec::new(); labels.len()];
    let mut sorted: Vec<&(String, String)> = corpus.iter().collect();
    sorted.sort();
    for (sentence, domain) in sorted {
        let ids = vocab.encode(sentence);
        if ids.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        by_label[map[domain]].push(ids);
    }
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let mut label_counts = BTreeMap::new();
    for (label, mut items) in by_label.into_iter().enumerate() {
        label_counts.insert(labels[label].clone(), items.len());
        items.shuffle(&mut rng);
        let n_held = items.len() / 10;
        for (i, ids) in items.into_iter().enumerate() {
            if i < n_held {
                heldout.push((ids, label));
            } else {
                train.push((ids, label));
            }
        }
    }

    let mut clf = SentenceClassifier::new(labels, cfg.scheme, vocab.len(), cfg, seed);
    let mut opt = Adam::new(&clf.params, cfg.lr);
    let mut batches = Batcher::new(train.len(), cfg.batch_size, seed ^ 0x5eed)?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.min(train.len()));
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = batches.next_batch(&train);
            let refs: Vec<&[usize]> = batch.iter().map(|(s, _)| s.as_slice()).collect();
            let targets: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
            let mut tape = Tape::new();
            let p = clf.params.bind(&mut tape)?;
            let logits = clf.logits_on_tape(&mut tape, &p, &refs)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            total += tape.value(loss).item();
            let mut g = tape.backward_scalar(loss)?;
            let grads = clf.params.collect_grads(&mut g, &p);
            opt.step(&mut clf.params, &grads)?;
        }
        epoch_loss.push(total / steps_per_epoch as f64);
    }

    let heldout_accuracy = if heldout.is_empty() {
        f64::NAN
    } else {
        let refs: Vec<Vec<usize>> = heldout.iter().map(|(s, _)| s.clone()).collect();
        let mut correct = 0;
        for (chunk, gold) in refs.chunks(256).zip(heldout.chunks(256)) {
            let r: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            for (probs, (_, label)) in clf.predict_batch(&r)?.iter().zip(gold) {
                if argmax(probs) == *label {
                    correct += 1;
                }
            }
        }
        correct as f64 / heldout.len() as f64
    };
    let report = ClassifierReport {
        label_counts,
        heldout: heldout.len(),
        heldout_accuracy,
        epoch_loss,
    };
    Ok((clf, report))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `score<TAB>domain<TAB>sentence` lines.
pub fn score_lines(clf: &SentenceClassifier, vocab: &Vocabulary, corpus: &[(String, String)]) -> Result<String> {
    let ids: Vec<Vec<usize>> = corpus.iter().map(|(s, _)| vocab.encode(s)).collect();
    let scores = clf.score_all(&ids)?;
    let mut out = String::new();
    for ((sentence, domain), score) in corpus.iter().zip(scores) {
        out.push_str(&format!("{score}\t{domain}\t{sentence}\n"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_layer_gives_uniform_scores() {
        let cfg = ClassifierConfig::default();
        let mut clf = SentenceClassifier::new(vec!["g".into(), "a".into(), "b".into()], LabelScheme::ManyLabel, 20, &cfg, 0);
        *clf.params_mut().get_mut(OUT_W) = Tensor::zeros(&[cfg.hidden_dim, 3]);
        let p = clf.predict(&[4, 5, 6]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((clf.score(&[7]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_label_scheme_merges_domains() {
        let (labels, map) = label_table(&["g", "a", "b", "a"], "g", LabelScheme::TwoLabel).unwrap();
        assert_eq!(labels.len(), 2);
        assert_eq!((map["g"], map["a"], map["b"]), (0, 1, 1));
        let (labels, _) = label_table(&["g", "a", "b"], "g", LabelScheme::ManyLabel).unwrap();
        assert_eq!(labels, ["g", "a", "b"]);
        assert!(label_table(&["g", "g"], "g", LabelScheme::ManyLabel).is_err());
        assert!(label_table(&["a", "b"], "g", LabelScheme::ManyLabel).is_err());
    }
}
