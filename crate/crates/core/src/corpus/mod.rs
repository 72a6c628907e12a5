//! Parallel corpora: ingestion, vocabulary, synthetic domains and the
//! meta-learning split.

mod split;
mod synth;
mod vocab;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use split::{make_meta_split, DomainSplit, MetaSplit, SplitSizes};
pub use synth::{synthesize, SynthSpec};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

/// Sentences longer than this many tokens are dropped at ingestion.
pub const MAX_SENTENCE_TOKENS: usize = 175;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RealFile,
    Synthetic,
}

/// Deduplicated parallel sentences of one domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainCorpus {
    pub domain: String,
    pub pairs: Vec<(String, String)>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub read: usize,
    pub empty: usize,
    pub too_long: usize,
    pub duplicates: usize,
    pub kept: usize,
}

/// Whitespace tokenizer.
pub fn tokenize(s: &str) -> impl Iterator<Item = &str> {
    s.split_whitespace()
}

impl DomainCorpus {
    /// Drops empty and over-length pairs, then exact duplicates (first
    /// occurrence wins).
    pub fn clean(
        domain: impl Into<String>,
        raw: impl IntoIterator<Item = (String, String)>,
        max_tokens: usize,
        provenance: Provenance,
    ) -> (Self, IngestReport) {
        let mut report = IngestReport::default();
        let mut seen = HashSet::new();
        let mut pairs = Vec::new();
        for (s, t) in raw {
            report.read += 1;
            let (ns, nt) = (tokenize(&s).count(), tokenize(&t).count());
            if ns == 0 || nt == 0 {
                report.empty += 1;
                continue;
            }
            if ns > max_tokens || nt > max_tokens {
                report.too_long += 1;
                continue;
            }
            let key = (normalize(&s), normalize(&t));
            if !seen.insert(key.clone()) {
                report.duplicates += 1;
                continue;
            }
            pairs.push(key);
        }
        report.kept = pairs.len();
        (
            DomainCorpus {
                domain: domain.into(),
                pairs,
                provenance,
            },
            report,
        )
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes `{prefix}.src` and `{prefix}.tgt`.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        write_parallel(prefix, &self.pairs)
    }

    /// SHA-256 over the domain name and every pair.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.domain.as_bytes());
        for (s, t) in &self.pairs {
            h.update(s.as_bytes());
            h.update([0]);
            h.update(t.as_bytes());
            h.update([1]);
        }
        hex::encode(h.finalize())
    }
}

fn normalize(s: &str) -> String {
    tokenize(s).collect::<Vec<_>>().join(" ")
}

/// Reads the line-aligned `{prefix}.src` / `{prefix}.tgt` files.
pub fn ingest(prefix: &Path, domain: &str) -> Result<(DomainCorpus, IngestReport)> {
    let pairs = read_parallel(prefix)?;
    Ok(DomainCorpus::clean(domain, pairs, MAX_SENTENCE_TOKENS, Provenance::RealFile))
}

pub(crate) fn with_ext(prefix: &Path, ext: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

pub fn read_parallel(prefix: &Path) -> Result<Vec<(String, String)>> {
    let src = fs::read_to_string(with_ext(prefix, "src"))?;
    let tgt = fs::read_to_string(with_ext(prefix, "tgt"))?;
    let (s, t): (Vec<&str>, Vec<&str>) = (src.lines().collect(), tgt.lines().collect());
    if s.len() != t.len() {
        return Err(Error::Misaligned {
            src_lines: s.len(),
            tgt_lines: t.len(),
        });
    }
    Ok(s.into_iter()
        .zip(t)
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect())
}

pub fn write_parallel(prefix: &Path, pairs: &[(String, String)]) -> Result<()> {
    if let Some(dir) = prefix.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut src = String::new();
    let mut tgt = String::new();
    for (s, t) in pairs {
        src.push_str(s);
        src.push('\n');
        tgt.push_str(t);
        tgt.push('\n');
    }
    fs::write(with_ext(prefix, "src"), src)?;
    fs::write(with_ext(prefix, "tgt"), tgt)?;
    Ok(())
}
