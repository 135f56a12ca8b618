use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::Decoder;
use super::{Model, TokenId};
use crate::error::{Error, Result};

/// Penalty that effectively removes a token from the candidate set.
pub const HARD_EXCLUSION: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    pub temperature: f64,
    /// Take the argmax instead of sampling (the T -> 0 limit).
    pub greedy: bool,
    /// Additive logit penalty for tokens that would repeat a bigram already
    /// present in the history.
    pub bigram_penalty: Option<f64>,
}

impl SamplingPolicy {
    pub fn greedy() -> Self {
        Self { temperature: 1.0, greedy: true, bigram_penalty: None }
    }

    pub fn temperature(temperature: f64) -> Self {
        Self { temperature, greedy: false, bigram_penalty: None }
    }

    pub fn with_bigram_penalty(mut self, penalty: f64) -> Self {
        self.bigram_penalty = Some(penalty);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub token: TokenId,
    /// Every candidate was penalized, so the unpenalized logits were used.
    pub fell_back: bool,
}

/// Tokens `v` such that `(history.last, v)` already occurs in `history`.
fn repeated_bigram_continuations(history: &[TokenId], vocab: usize) -> Vec<bool> {
    let mut banned = vec![false; vocab];
    if let Some(&last) = history.last() {
        for w in history.windows(2) {
            if w[0] == last && w[1] < vocab {
                banned[w[1]] = true;
            }
        }
    }
    banned
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draw the next token from `softmax(logits / T)` after applying the
/// optional bigram penalty.
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[f64],
    rng: &mut R,
    policy: &SamplingPolicy,
    history: &[TokenId],
) -> Result<Sample> {
    if logits.is_empty() {
        return Err(Error::validation("cannot sample from an empty logit vector"));
    }
    if !policy.greedy && !(policy.temperature > 0.0 && policy.temperature.is_finite()) {
        return Err(Error::validation("sampling temperature must be positive and finite"));
    }
    let mut adjusted = logits.to_vec();
    let mut fell_back = false;
    if let Some(penalty) = policy.bigram_penalty {
        let banned = repeated_bigram_continuations(history, logits.len());
        if banned.iter().all(|&b| b) {
            fell_back = true;
        } else {
            for (a, &b) in adjusted.iter_mut().zip(&banned) {
                if b {
                    *a += penalty;
                }
            }
        }
    }
    if policy.greedy {
        return Ok(Sample { token: argmax(&adjusted), fell_back });
    }
    let max = adjusted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> =
        adjusted.iter().map(|a| ((a - max) / policy.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut token = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            token = i;
            break;
        }
    }
    Ok(Sample { token, fell_back })
}

/// Greedy continuation of `prefix` by `model`, returning only the new tokens.
pub fn greedy_generate(model: &Model, prefix: &[TokenId], len: usize) -> Result<Vec<TokenId>> {
    if prefix.is_empty() {
        return Err(Error::validation("greedy generation needs a non-empty prefix"));
    }
    if prefix.len() + len > model.spec.max_seq + 1 {
        return Err(Error::validation(format!(
            "prefix {} + continuation {len} exceeds max_seq {}",
            prefix.len(),
            model.spec.max_seq
        )));
    }
    let mut dec = Decoder::new(model);
    let mut logits = Vec::new();
    for &t in prefix {
        logits = dec.step(t)?;
    }
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let next = argmax(&logits);
        out.push(next);
        if i + 1 < len {
            logits = dec.step(next)?;
        }
    }
    Ok(out)
}
