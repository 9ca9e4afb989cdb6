//! Greedy and beam decoding from BOS until EOS or a length limit.

use super::config::Specials;
use super::forward::{argmax, next_token_log_probs};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::units::UnitSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated tokens without BOS or EOS.
    pub units: UnitSequence,
    /// True when decoding stopped at the length limit instead of at EOS.
    pub truncated: bool,
    /// Sum of log-probabilities divided by the number of scored tokens
    /// (EOS counts when present).
    pub score: f64,
}

fn finish(p: &ModelParams, tokens: Vec<u32>, logp: f64, truncated: bool) -> Result<Generation> {
    let scored = tokens.len() + usize::from(!truncated);
    Ok(Generation {
        units: UnitSequence::new(tokens, p.base_vocab() as u32)?,
        truncated,
        score: logp / scored.max(1) as f64,
    })
}

fn limit(p: &ModelParams, max_len: usize) -> Result<usize> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    Ok(max_len.min(p.config.max_unit_len))
}

/// Tokens the decoder may emit: the base vocabulary and EOS.
fn candidates(p: &ModelParams) -> impl Iterator<Item = u32> {
    let specials = Specials::for_base(p.base_vocab());
    (0..p.base_vocab() as u32).chain(std::iter::once(specials.eos))
}

/// Picks the most probable allowed token at every step.
pub fn greedy(p: &ModelParams, grid: &[u32], max_len: usize) -> Result<Generation> {
    let max_len = limit(p, max_len)?;
    let eos = Specials::for_base(p.base_vocab()).eos;
    let mut tokens = Vec::new();
    let mut logp = 0.0;
    while tokens.len() < max_len {
        let lp = next_token_log_probs(p, grid, &tokens)?;
        let allowed: Vec<u32> = candidates(p).collect();
        let best = allowed[argmax(allowed.iter().map(|&t| lp[t as usize]))];
        logp += lp[best as usize];
        if best == eos {
            return finish(p, tokens, logp, false);
        }
        tokens.push(best);
    }
    finish(p, tokens, logp, true)
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<u32>,
    logp: f64,
}

/// Beam search; `beam_size == 1` is greedy decoding.
///
/// Each step keeps the `beam_size` best extensions by total log-probability.
/// Extensions ending in EOS leave the beam as finished hypotheses; anything
/// still open at the length limit is finished as truncated. The answer is
/// the finished hypothesis with the best length-normalized score, ties
/// going to the lexicographically smaller token sequence.
pub fn generate(p: &ModelParams, grid: &[u32], max_len: usize, beam_size: usize) -> Result<Generation> {
    if beam_size == 0 {
        return Err(Error::invalid("beam_size must be at least 1"));
    }
    let max_len = limit(p, max_len)?;
    let eos = Specials::for_base(p.base_vocab()).eos;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
    }];
    // (hypothesis with EOS appended when it ended, truncated)
    let mut finished: Vec<(Hyp, bool)> = Vec::new();

    for _ in 0..max_len {
        let mut expanded = Vec::new();
        for h in &live {
            let lp = next_token_log_probs(p, grid, &h.tokens)?;
            for tok in candidates(p) {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                expanded.push(Hyp {
                    tokens,
                    logp: h.logp + lp[tok as usize],
                });
            }
        }
        expanded.sort_by(|a, b| b.logp.total_cmp(&a.logp).then_with(|| a.tokens.cmp(&b.tokens)));
        expanded.truncate(beam_size);
        live.clear();
        for h in expanded {
            if h.tokens.last() == Some(&eos) {
                finished.push((h, false));
            } else {
                live.push(h);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|h| (h, true)));

    let normalized = |h: &Hyp| h.logp / h.tokens.len().max(1) as f64;
    let (best, truncated) = finished
        .into_iter()
        .min_by(|(a, _), (b, _)| {
            normalized(b)
                .total_cmp(&normalized(a))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .expect("at least one hypothesis");
    let mut tokens = best.tokens;
    if !truncated {
        tokens.pop();
    }
    finish(p, tokens, best.logp, truncated)
}
