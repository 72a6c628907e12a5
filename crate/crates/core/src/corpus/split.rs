use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_parallel, write_parallel, DomainCorpus};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    /// Meta-train pairs per seen domain, divided 1:2 into support and query.
    pub meta_train: usize,
    pub test_support: usize,
    pub test_query: usize,
    /// Upper bound on per-domain dev pairs taken from the remainder.
    pub dev_cap: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            meta_train: 2000,
            test_support: 200,
            test_query: 400,
            dev_cap: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DomainSplit {
    pub support: Vec<(String, String)>,
    pub query: Vec<(String, String)>,
}

impl DomainSplit {
    pub fn is_empty(&self) -> bool {
        self.support.is_empty() && self.query.is_empty()
    }

    pub fn all(&self) -> impl Iterator<Item = &(String, String)> {
        self.support.iter().chain(&self.query)
    }
}

/// Per-domain support/query sets. Unseen domains are present in
/// `meta_train` with empty splits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetaSplit {
    pub meta_train: BTreeMap<String, DomainSplit>,
    pub meta_test: BTreeMap<String, DomainSplit>,
    pub dev: BTreeMap<String, Vec<(String, String)>>,
}

fn domain_seed(seed: u64, domain: &str) -> u64 {
    let h = Sha256::digest(domain.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Disjoint per-domain split. Each corpus is shuffled with a seed derived
/// from `seed` and its name, then carved into meta-test support, meta-test
/// query, meta-train (seen domains only) and dev, in that order.
pub fn make_meta_split(
    corpora: &[DomainCorpus],
    seen: &[String],
    sizes: &SplitSizes,
    seed: u64,
) -> Result<MetaSplit> {
    for s in seen {
        if !corpora.iter().any(|c| &c.domain == s) {
            return Err(Error::InvalidArgument(format!("seen domain `{s}` has no corpus")));
        }
    }
    let mut out = MetaSplit::default();
    for c in corpora {
        let is_seen = seen.contains(&c.domain);
        let needed =
            sizes.test_support + sizes.test_query + if is_seen { sizes.meta_train } else { 0 };
        if c.len() < needed {
            return Err(Error::DomainTooSmall {
                domain: c.domain.clone(),
                needed,
                available: c.len(),
            });
        }
        let mut pairs = c.pairs.clone();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(domain_seed(seed, &c.domain)));
        let mut rest = pairs.into_iter();
        let mut take = |n: usize| rest.by_ref().take(n).collect::<Vec<_>>();
        let test = DomainSplit {
            support: take(sizes.test_support),
            query: take(sizes.test_query),
        };
        let train = if is_seen {
            let s = sizes.meta_train / 3;
            DomainSplit {
                support: take(s),
                query: take(sizes.meta_train - s),
            }
        } else {
            DomainSplit::default()
        };
        let dev = take(sizes.dev_cap);
        out.meta_test.insert(c.domain.clone(), test);
        out.meta_train.insert(c.domain.clone(), train);
        out.dev.insert(c.domain.clone(), dev);
    }
    Ok(out)
}

impl MetaSplit {
    /// Layout: `{dir}/{meta_train|meta_test}/{domain}/{support|query}.{src,tgt}`
    /// and `{dir}/dev/{domain}.{src,tgt}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (part, map) in [("meta_train", &self.meta_train), ("meta_test", &self.meta_test)] {
            for (domain, split) in map {
                let d = dir.join(part).join(domain);
                write_parallel(&d.join("support"), &split.support)?;
                write_parallel(&d.join("query"), &split.query)?;
            }
        }
        for (domain, pairs) in &self.dev {
            write_parallel(&dir.join("dev").join(domain), pairs)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, domains: &[String]) -> Result<Self> {
        let mut out = MetaSplit::default();
        for domain in domains {
            for (part, map) in [("meta_train", &mut out.meta_train), ("meta_test", &mut out.meta_test)] {
                let d = dir.join(part).join(domain);
                map.insert(
                    domain.clone(),
                    DomainSplit {
                        support: read_parallel(&d.join("support"))?,
                        query: read_parallel(&d.join("query"))?,
                    },
                );
            }
            out.dev.insert(domain.clone(), read_parallel(&dir.join("dev").join(domain))?);
        }
        Ok(out)
    }
}
