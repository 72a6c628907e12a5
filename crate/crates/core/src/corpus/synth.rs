use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DomainCorpus, Provenance, MAX_SENTENCE_TOKENS};
use crate::error::{Error, Result};

/// Substitution-cipher domains. Domain 0 draws from a base lexicon; every
/// other domain keeps an `overlap` fraction of that lexicon and replaces the
/// rest with words of its own, so `overlap = 0` gives disjoint vocabularies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub domains: Vec<String>,
    pub pairs_per_domain: usize,
    pub lexicon_size: usize,
    pub overlap: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            domains: ["general", "news", "law", "med", "bio", "tech"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            pairs_per_domain: 3000,
            lexicon_size: 40,
            overlap: 0.5,
            min_len: 4,
            max_len: 9,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        if self.domains.iter().collect::<HashSet<_>>().len() != self.domains.len() {
            return bad("domain names must be unique".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if self.lexicon_size < 2 {
            return bad("lexicon_size must be at least 2".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > MAX_SENTENCE_TOKENS {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        Ok(())
    }
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let len = rng.gen_range(3..=6);
        let w: String = (0..len)
            .map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char)
            .collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

/// Deterministic in `spec` (including the seed).
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<DomainCorpus>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used_src = HashSet::new();
    let mut used_tgt = HashSet::new();
    let mut entry = |rng: &mut ChaCha8Rng| {
        (fresh_word(rng, &mut used_src), fresh_word(rng, &mut used_tgt))
    };
    let base: Vec<(String, String)> = (0..spec.lexicon_size).map(|_| entry(&mut rng)).collect();
    let shared = (spec.overlap * spec.lexicon_size as f64).round() as usize;

    let mut out = Vec::with_capacity(spec.domains.len());
    for (d, name) in spec.domains.iter().enumerate() {
        let lexicon = if d == 0 {
            base.clone()
        } else {
            let mut lex: Vec<_> = base.choose_multiple(&mut rng, shared).cloned().collect();
            lex.extend((shared..spec.lexicon_size).map(|_| entry(&mut rng)));
            lex
        };
        let mut seen = HashSet::new();
        let mut pairs = Vec::with_capacity(spec.pairs_per_domain);
        let mut attempts = 0usize;
        while pairs.len() < spec.pairs_per_domain {
            attempts += 1;
            if attempts > 50 * spec.pairs_per_domain + 1000 {
                return Err(Error::InvalidArgument(format!(
                    "cannot draw {} distinct sentences for `{name}`; raise lexicon_size or max_len",
                    spec.pairs_per_domain
                )));
            }
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let words: Vec<&(String, String)> =
                (0..len).map(|_| &lexicon[rng.gen_range(0..lexicon.len())]).collect();
            let src = words.iter().map(|w| w.0.as_str()).collect::<Vec<_>>().join(" ");
            if !seen.insert(src.clone()) {
                continue;
            }
            let tgt = words.iter().map(|w| w.1.as_str()).collect::<Vec<_>>().join(" ");
            pairs.push((src, tgt));
        }
        out.push(DomainCorpus {
            domain: name.clone(),
            pairs,
            provenance: Provenance::Synthetic,
        });
    }
    Ok(out)
}
