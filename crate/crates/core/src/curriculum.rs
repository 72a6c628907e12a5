//! Orders scored sentence pairs into meta-learning tasks: general-looking
//! sentences first, later tasks drifting towards in-domain ones.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Example;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub domain: usize,
    /// Curriculum score; `None` means the pair was never scored.
    pub score: Option<f64>,
}

impl ScoredPair {
    /// Source plus target tokens.
    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len()
    }

    pub fn example(&self) -> Example {
        Example {
            src: self.src.clone(),
            tgt: self.tgt.clone(),
            domain: Some(self.domain),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub index: usize,
    pub support: Vec<ScoredPair>,
    pub query: Vec<ScoredPair>,
}

impl Task {
    pub fn support_examples(&self) -> Vec<Example> {
        self.support.iter().map(ScoredPair::example).collect()
    }

    pub fn query_examples(&self) -> Vec<Example> {
        self.query.iter().map(ScoredPair::example).collect()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &ScoredPair> {
        self.support.iter().chain(&self.query)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TokenBased,
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub n_tasks: usize,
    pub support_token_budget: usize,
    pub query_token_budget: usize,
    pub strategy: Strategy,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_tasks: 160,
            support_token_budget: 8000,
            query_token_budget: 16000,
            strategy: Strategy::TokenBased,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::InvalidArgument("n_tasks must be at least 1".into()));
        }
        if self.support_token_budget == 0 || self.query_token_budget == 0 {
            return Err(Error::InvalidArgument("token budgets must be positive".into()));
        }
        Ok(())
    }
}

/// Tasks plus any non-fatal irregularities met while building them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitOutcome {
    pub tasks: Vec<Task>,
    pub warnings: Vec<String>,
}

fn sorted_by_score(pairs: &[ScoredPair]) -> Result<Vec<&ScoredPair>> {
    if pairs.is_empty() {
        return Err(Error::Empty("scored corpus"));
    }
    if let Some(i) = pairs.iter().position(|p| p.score.is_none()) {
        return Err(Error::InvalidArgument(format!("pair {i} has no curriculum score")));
    }
    let mut sorted: Vec<&ScoredPair> = pairs.iter().collect();
    // stable: ties keep input order
    sorted.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()));
    Ok(sorted)
}

/// Divides a task's pairs between support and query. Support takes pairs
/// until it holds its budget share of the task's tokens; query takes the
/// rest. Each side stops at the first pair that would exceed its budget;
/// pairs left over are dropped.
fn assign_roles(pairs: Vec<ScoredPair>, cfg: &SplitConfig, index: usize, warnings: &mut Vec<String>) -> Task {
    let (sb, qb) = (cfg.support_token_budget, cfg.query_token_budget);
    let total: usize = pairs.iter().map(ScoredPair::tokens).sum();
    let share = (total as f64 * sb as f64 / (sb + qb) as f64).ceil() as usize;
    let mut it = pairs.into_iter().peekable();
    let mut support = Vec::new();
    let mut used = 0;
    while let Some(p) = it.peek() {
        if used >= share || used + p.tokens() > sb {
            break;
        }
        used += p.tokens();
        support.push(it.next().expect("peeked"));
    }
    let mut query = Vec::new();
    let mut used = 0;
    while let Some(p) = it.peek() {
        if used + p.tokens() > qb {
            break;
        }
        used += p.tokens();
        query.push(it.next().expect("peeked"));
    }
    let dropped = it.count();
    if dropped > 0 {
        warnings.push(format!("task {index}: {dropped} pairs dropped by the token budgets"));
    }
    Task { index, support, query }
}

fn chunk_sizes(len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| len / n + usize::from(i < len % n)).collect()
}

/// Splits pairs into `n_tasks` tasks.
///
/// Token-based: pairs sorted by descending score (stable) are cut into
/// `n_tasks` contiguous chunks of near-equal size, so every pair of task
/// `i` scores at least as high as every pair of task `i + 1`.
///
/// Balanced: each task draws the same number of pairs from every domain
/// (±1), best-scored first within a domain (see [`balance_task`]).
pub fn split_tasks(pairs: &[ScoredPair], cfg: &SplitConfig) -> Result<SplitOutcome> {
    cfg.validate()?;
    let sorted = sorted_by_score(pairs)?;
    let mut out = SplitOutcome::default();
    let n = if sorted.len() < cfg.n_tasks {
        out.warnings.push(format!(
            "only {} pairs for {} tasks; building {} tasks",
            sorted.len(),
            cfg.n_tasks,
            sorted.len()
        ));
        sorted.len()
    } else {
        cfg.n_tasks
    };
    let capacity = cfg.support_token_budget + cfg.query_token_budget;
    match cfg.strategy {
        Strategy::TokenBased => {
            let mut rest = sorted.into_iter();
            for (index, size) in chunk_sizes(pairs.len(), n).into_iter().enumerate() {
                let chunk: Vec<ScoredPair> = rest.by_ref().take(size).cloned().collect();
                out.tasks.push(assign_roles(chunk, cfg, index, &mut out.warnings));
            }
        }
        Strategy::Balanced => {
            let mut domains: Vec<usize> = pairs.iter().map(|p| p.domain).collect();
            domains.sort_unstable();
            domains.dedup();
            let mut pools: Vec<VecDeque<ScoredPair>> = vec![VecDeque::new(); domains.len()];
            for p in sorted {
                let d = domains.binary_search(&p.domain).expect("domain listed");
                pools[d].push_back(p.clone());
            }
            for (index, slots) in chunk_sizes(pairs.len(), n).into_iter().enumerate() {
                let (mut chosen, warnings) = balance_task(&mut pools, slots, capacity);
                out.warnings.extend(warnings.into_iter().map(|w| format!("task {index}: {w}")));
                chosen.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()));
                out.tasks.push(assign_roles(chosen, cfg, index, &mut out.warnings));
            }
            let left: usize = pools.iter().map(VecDeque::len).sum();
            if left > 0 {
                out.warnings.push(format!("{left} pairs left unassigned by the token budgets"));
            }
        }
    }
    Ok(out)
}

/// Draws up to `slots` pairs from per-domain pools (each sorted by
/// descending score), as evenly as possible: every domain gets
/// `slots / D` pairs, and the `slots % D` extra pairs go to the domains
/// whose best remaining pair scores highest. Picking proceeds round by
/// round and stops before `token_budget` would be exceeded, so per-domain
/// counts never differ by more than one. A domain that runs dry is skipped
/// and its slots are refilled round-robin from the others, with a warning.
pub fn balance_task(pools: &mut [VecDeque<ScoredPair>], slots: usize, token_budget: usize) -> (Vec<ScoredPair>, Vec<String>) {
    let mut warnings = Vec::new();
    let d = pools.len();
    let mut chosen = Vec::with_capacity(slots);
    if d == 0 {
        return (chosen, warnings);
    }
    // domain order: highest available score first, ties by domain index
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let sa = pools[a].front().and_then(|p| p.score).unwrap_or(f64::NEG_INFINITY);
        let sb = pools[b].front().and_then(|p| p.score).unwrap_or(f64::NEG_INFINITY);
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    let mut used = 0;
    let mut exhausted = vec![false; d];
    'rounds: while chosen.len() < slots {
        let mut progressed = false;
        for &dom in &order {
            if chosen.len() == slots {
                break 'rounds;
            }
            match pools[dom].front() {
                None => {
                    if !exhausted[dom] {
                        exhausted[dom] = true;
                        warnings.push(format!("domain {dom} exhausted; refilling from the others"));
                    }
                }
                Some(p) => {
                    if used + p.tokens() > token_budget {
                        break 'rounds;
                    }
                    used += p.tokens();
                    chosen.push(pools[dom].pop_front().expect("front exists"));
                    progressed = true;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    (chosen, warnings)
}

/// `task_index<TAB>role<TAB>domain<TAB>score<TAB>src<TAB>tgt` lines.
pub fn manifest(tasks: &[Task], vocab: &Vocabulary, domain_names: &[String]) -> String {
    let mut out = String::new();
    for t in tasks {
        for (role, pairs) in [("support", &t.support), ("query", &t.query)] {
            for p in pairs {
                let domain = domain_names.get(p.domain).map_or("?", String::as_str);
                out.push_str(&format!(
                    "{}\t{role}\t{domain}\t{}\t{}\t{}\n",
                    t.index,
                    p.score.unwrap_or(f64::NAN),
                    vocab.decode(&p.src),
                    vocab.decode(&p.tgt)
                ));
            }
        }
    }
    out
}

/// Inverse of [`manifest`].
pub fn parse_manifest(text: &str, vocab: &Vocabulary, domain_names: &[String]) -> Result<Vec<Task>> {
    let mut tasks: Vec<Task> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| Error::Parse(format!("manifest line {}: {m}", n + 1));
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let index: usize = f[0].parse().map_err(|_| bad("bad task index"))?;
        let domain = domain_names.iter().position(|d| d == f[2]).ok_or_else(|| bad("unknown domain"))?;
        let score: f64 = f[3].parse().map_err(|_| bad("bad score"))?;
        let pair = ScoredPair {
            src: vocab.encode(f[4]),
            tgt: vocab.encode(f[5]),
            domain,
            score: Some(score),
        };
        if tasks.last().map_or(true, |t| t.index != index) {
            tasks.push(Task { index, support: vec![], query: vec![] });
        }
        let task = tasks.last_mut().expect("pushed");
        match f[1] {
            "support" => task.support.push(pair),
            "query" => task.query.push(pair),
            _ => return Err(bad("role must be support or query")),
        }
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(score: f64, domain: usize, len: usize) -> ScoredPair {
        ScoredPair { src: vec![4; len], tgt: vec![5; len], domain, score: Some(score) }
    }

    fn big() -> SplitConfig {
        SplitConfig { n_tasks: 2, support_token_budget: 1000, query_token_budget: 2000, ..Default::default() }
    }

    #[test]
    fn sort_order_example() {
        let pairs: Vec<_> = [0.2, 0.9, 0.1, 0.8].iter().map(|&s| pair(s, 0, 2)).collect();
        let out = split_tasks(&pairs, &big()).unwrap();
        let scores = |t: &Task| t.pairs().map(|p| p.score.unwrap()).collect::<Vec<_>>();
        assert_eq!(scores(&out.tasks[0]), [0.9, 0.8]);
        assert_eq!(scores(&out.tasks[1]), [0.2, 0.1]);
        assert_eq!(out.tasks[0].support.len(), 1);
        assert_eq!(out.tasks[0].query.len(), 1);
    }

    #[test]
    fn equal_scores_chunk_in_input_order() {
        let pairs: Vec<_> = (0..6).map(|i| ScoredPair { src: vec![4 + i], ..pair(0.5, 0, 1) }).collect();
        let out = split_tasks(&pairs, &big()).unwrap();
        let firsts: Vec<usize> = out.tasks.iter().flat_map(|t| t.pairs().map(|p| p.src[0])).collect();
        assert_eq!(firsts, [4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn unscored_and_empty_inputs_are_errors() {
        assert!(split_tasks(&[], &big()).is_err());
        let mut p = pair(0.5, 0, 1);
        p.score = None;
        assert!(split_tasks(&[p], &big()).is_err());
    }

    #[test]
    fn remainder_goes_to_highest_scoring_domains() {
        let mut pools: Vec<VecDeque<ScoredPair>> = vec![
            (0..5).map(|i| pair(0.5 - i as f64 * 0.01, 0, 1)).collect(),
            (0..5).map(|i| pair(0.9 - i as f64 * 0.01, 1, 1)).collect(),
            (0..5).map(|i| pair(0.7 - i as f64 * 0.01, 2, 1)).collect(),
        ];
        let (chosen, warnings) = balance_task(&mut pools, 8, 1000);
        let count = |d| chosen.iter().filter(|p| p.domain == d).count();
        assert_eq!((count(0), count(1), count(2)), (2, 3, 3));
        assert!(warnings.is_empty());
    }

    #[test]
    fn exhausted_domain_is_refilled_round_robin() {
        let mut pools: Vec<VecDeque<ScoredPair>> = vec![
            vec![pair(0.9, 0, 1)].into(),
            (0..5).map(|_| pair(0.5, 1, 1)).collect(),
        ];
        let (chosen, warnings) = balance_task(&mut pools, 4, 1000);
        assert_eq!(chosen.len(), 4);
        assert_eq!(warnings.len(), 1);
    }
}
