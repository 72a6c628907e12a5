use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{tokenize, DomainCorpus};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id bijection with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `cap − 4` most frequent tokens over both sides of every
    /// corpus; frequency ties break lexicographically.
    pub fn build(corpora: &[DomainCorpus], cap: usize) -> Result<Self> {
        if cap < 5 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary cap {cap} leaves no room beyond the 4 reserved ids"
            )));
        }
        if corpora.is_empty() {
            return Err(Error::Empty("corpora"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for c in corpora {
            for (s, t) in &c.pairs {
                for tok in tokenize(s).chain(tokenize(t)) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(cap - RESERVED.len());
        Self::from_tokens(RESERVED.iter().copied().chain(ranked.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(str::to_string).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        tokenize(sentence).map(|t| self.id(t)).collect()
    }

    /// Drops special ids other than `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let v = Self::from_tokens(text.lines())?;
        if v.tokens.len() < RESERVED.len()
            || v.tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Parse("vocabulary must start with the reserved tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the vocabulary file bytes.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
