use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{DecoderState, IncrementalDecoder};

/// A left-to-right next-token distribution.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Self::State;

    /// Consumes one token per state; returns next-token log-probabilities.
    fn step(&self, states: &[Self::State], tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Self::State>)>;
}

impl StepModel for IncrementalDecoder<'_> {
    type State = DecoderState;

    fn start(&self) -> DecoderState {
        IncrementalDecoder::start(self)
    }

    fn step(&self, states: &[DecoderState], tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<DecoderState>)> {
        IncrementalDecoder::step(self, states, tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Upper bound on decoding steps (the end token counts as a step).
    pub max_length: usize,
    /// Completed hypotheses are ranked by `logprob / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 5,
            max_length: 64,
            length_penalty: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the end token.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// No end token within `max_length` steps.
    pub truncated: bool,
}

fn normalized(h: &Hypothesis, lp: f64) -> f64 {
    if lp == 0.0 {
        h.log_prob
    } else {
        h.log_prob / ((h.tokens.len() + 1) as f64).powf(lp)
    }
}

struct Live<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
}

/// Beam search. Candidates are ranked by score, then by parent rank, then
/// by token id, so `beam_size = 1` reproduces [`greedy_decode`].
pub fn beam_decode<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.beam_size == 0 {
        return Err(Error::InvalidArgument("beam_size must be at least 1".into()));
    }
    if cfg.max_length == 0 {
        return Err(Error::InvalidArgument("max_length must be at least 1".into()));
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start(),
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_length {
        let states: Vec<M::State> = live.iter().map(|h| h.state.clone()).collect();
        let last: Vec<usize> = live.iter().map(|h| *h.tokens.last().unwrap_or(&BOS)).collect();
        let (lps, next_states) = model.step(&states, &last)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, lp) in lps.iter().enumerate() {
            // only the best beam_size tokens of a parent can survive
            let mut idx: Vec<usize> = (0..lp.len()).collect();
            let keep = cfg.beam_size.min(lp.len());
            idx.select_nth_unstable_by(keep - 1, |&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &v in &idx[..keep] {
                cands.push((live[i].log_prob + lp[v], i, v));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (score, i, v) in cands {
            if next.len() == cfg.beam_size {
                break;
            }
            if v == EOS {
                completed.push(Hypothesis {
                    tokens: live[i].tokens.clone(),
                    log_prob: score,
                    truncated: false,
                });
            } else {
                let mut tokens = live[i].tokens.clone();
                tokens.push(v);
                next.push(Live {
                    tokens,
                    log_prob: score,
                    state: next_states[i].clone(),
                });
            }
        }
        live = next;
        let best_done = completed.iter().map(|h| normalized(h, cfg.length_penalty)).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.first().map_or(f64::NEG_INFINITY, |h| h.log_prob);
        let finished = if cfg.length_penalty == 0.0 {
            // scores only fall as hypotheses grow
            best_done >= best_live
        } else {
            completed.len() >= cfg.beam_size
        };
        if live.is_empty() || finished {
            break;
        }
    }
    let best = completed
        .into_iter()
        .reduce(|a, b| if normalized(&b, cfg.length_penalty) > normalized(&a, cfg.length_penalty) { b } else { a });
    Ok(best.unwrap_or_else(|| {
        let h = live.into_iter().next().expect("beam never empties without a completion");
        Hypothesis {
            tokens: h.tokens,
            log_prob: h.log_prob,
            truncated: true,
        }
    }))
}

/// Argmax rollout; ties go to the lowest token id.
pub fn greedy_decode<M: StepModel>(model: &M, max_length: usize) -> Result<Hypothesis> {
    let mut state = model.start();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_length {
        let last = *tokens.last().unwrap_or(&BOS);
        let (lp, mut next) = model.step(std::slice::from_ref(&state), &[last])?;
        let lp = &lp[0];
        let mut best = 0;
        for (v, &x) in lp.iter().enumerate() {
            if x > lp[best] {
                best = v;
            }
        }
        log_prob += lp[best];
        if best == EOS {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                truncated: false,
            });
        }
        tokens.push(best);
        state = next.remove(0);
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        truncated: true,
    })
}
