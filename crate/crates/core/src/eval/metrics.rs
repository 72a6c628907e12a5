use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

fn check(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypotheses"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts<T: Hash + Eq + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// (clipped matches, hypothesis n-grams, reference n-grams)
fn overlap<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// Corpus BLEU-4 over whitespace tokens, in [0, 100].
///
/// Orders for which the hypotheses contain no n-grams at all are left out
/// of the geometric mean. A zero match count at order ≥ 2 is smoothed
/// exponentially: the k-th such order gets precision `1 / (2^k · total)`.
/// No unigram matches at all gives 0.
pub fn bleu(hyps: &[String], refs: &[String]) -> Result<f64> {
    check(hyps, refs)?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        sys_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, t, _) = overlap(&h, &r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut order = 0;
    let mut zeros = 0;
    for n in 0..4 {
        if totals[n] == 0 {
            break;
        }
        order += 1;
        let p = if matches[n] == 0 {
            zeros += 1;
            1.0 / (2f64.powi(zeros) * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if sys_len < ref_len {
        (1.0 - ref_len as f64 / sys_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / order as f64).exp())
}

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

/// Sentence chrF in [0, 100]: character n-grams (whitespace removed) for
/// n = 1..=6, F-β per order with β = 2, averaged over the orders that
/// occur in either string.
pub fn sentence_chrf(hyp: &str, reference: &str) -> f64 {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let mut sum = 0.0;
    let mut orders = 0;
    for n in 1..=CHRF_ORDER {
        let (m, ht, rt) = overlap(&h, &r, n);
        if ht == 0 && rt == 0 {
            continue;
        }
        orders += 1;
        if m == 0 {
            continue;
        }
        let p = m as f64 / ht as f64;
        let rc = m as f64 / rt as f64;
        let b2 = CHRF_BETA * CHRF_BETA;
        sum += (1.0 + b2) * p * rc / (b2 * p + rc);
    }
    if orders == 0 {
        return 0.0;
    }
    100.0 * sum / orders as f64
}

/// Mean sentence chrF over the corpus.
pub fn chrf(hyps: &[String], refs: &[String]) -> Result<f64> {
    check(hyps, refs)?;
    let total: f64 = hyps.iter().zip(refs).map(|(h, r)| sentence_chrf(h, r)).sum();
    Ok(total / hyps.len() as f64)
}
