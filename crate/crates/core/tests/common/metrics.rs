use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Number of times `gram` occurs in `seq` (linear scan).
fn occurrences<T: PartialEq>(seq: &[T], gram: &[T]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len()).filter(|&i| &seq[i..i + gram.len()] == gram).count()
}

fn distinct_grams<T: PartialEq + Clone>(seq: &[T], n: usize) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = Vec::new();
    if seq.len() >= n {
        for i in 0..=seq.len() - n {
            let g = seq[i..i + n].to_vec();
            if !out.contains(&g) {
                out.push(g);
            }
        }
    }
    out
}

fn clipped<T: PartialEq + Clone>(h: &[T], r: &[T], n: usize) -> usize {
    distinct_grams(h, n).iter().map(|g| occurrences(h, g).min(occurrences(r, g))).sum()
}

pub fn bleu_oracle(hyps: &[String], refs: &[String]) -> f64 {
    let (mut m, mut t, mut hl, mut rl) = ([0usize; 4], [0usize; 4], 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split(' ').filter(|w| !w.is_empty()).collect();
        let r: Vec<&str> = r.split(' ').filter(|w| !w.is_empty()).collect();
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            m[n - 1] += clipped(&h, &r, n);
            t[n - 1] += if h.len() >= n { h.len() - n + 1 } else { 0 };
        }
    }
    if m[0] == 0 {
        return 0.0;
    }
    let mut logs = Vec::new();
    let mut k = 0;
    for n in 0..4 {
        if t[n] == 0 {
            break;
        }
        if m[n] == 0 {
            k += 1;
            logs.push((1.0 / (2f64.powi(k) * t[n] as f64)).ln());
        } else {
            logs.push((m[n] as f64 / t[n] as f64).ln());
        }
    }
    let bp = if hl < rl { (1.0 - rl as f64 / hl as f64).exp() } else { 1.0 };
    100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

pub fn chrf_oracle(h: &str, r: &str) -> f64 {
    let h: Vec<char> = h.chars().filter(|c| *c != ' ').collect();
    let r: Vec<char> = r.chars().filter(|c| *c != ' ').collect();
    let mut fs = Vec::new();
    for n in 1..=6 {
        let ht = if h.len() >= n { h.len() - n + 1 } else { 0 };
        let rt = if r.len() >= n { r.len() - n + 1 } else { 0 };
        if ht == 0 && rt == 0 {
            continue;
        }
        let m = clipped(&h, &r, n) as f64;
        if m == 0.0 {
            fs.push(0.0);
            continue;
        }
        let (p, rc) = (m / ht as f64, m / rt as f64);
        fs.push(5.0 * p * rc / (4.0 * p + rc));
    }
    if fs.is_empty() {
        0.0
    } else {
        100.0 * fs.iter().sum::<f64>() / fs.len() as f64
    }
}

pub fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let words = ["a", "b", "ab", "ba", "c", "abc"];
    (0..rng.gen_range(1..7)).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}
