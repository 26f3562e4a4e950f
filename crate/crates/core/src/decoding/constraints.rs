use std::collections::BTreeSet;

use super::DecodeConfig;
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::synthworld::{TokenId, EOS};

/// Tokens that would complete an n-gram already present in `history`.
pub fn banned_by_ngram(history: &[TokenId], n: usize) -> BTreeSet<TokenId> {
    let mut out = BTreeSet::new();
    if n == 0 || history.len() + 1 < n {
        return out;
    }
    let prefix = &history[history.len() + 1 - n..];
    for window in history.windows(n) {
        if &window[..n - 1] == prefix {
            out.insert(window[n - 1]);
        }
    }
    out
}

/// Repetition penalty, n-gram blocking and EOS blocking, in that order,
/// followed by renormalisation.
///
/// The penalty acts on `s = ln p` of every token already in `history`:
/// `s / penalty` when `s > 0`, else `s * penalty`. Since `ln p <= 0` this
/// always sharpens against repeats.
pub fn apply_constraints(dist: &Array, history: &[TokenId], config: &DecodeConfig) -> Result<Array> {
    apply_with_mask(dist, history, config, &[])
}

pub(crate) fn apply_with_mask(
    dist: &Array,
    history: &[TokenId],
    config: &DecodeConfig,
    banned: &[TokenId],
) -> Result<Array> {
    let identity = config.repetition_penalty == 1.0 && config.no_repeat_ngram == 0 && !config.block_eos;
    if identity && banned.iter().all(|&t| dist.data().get(t).is_none_or(|&p| p == 0.0)) {
        return Ok(dist.clone());
    }
    let mut scores: Vec<f64> = dist.data().iter().map(|&p| p.ln()).collect();
    if config.repetition_penalty != 1.0 {
        let seen: BTreeSet<TokenId> = history.iter().copied().collect();
        for t in seen {
            if let Some(s) = scores.get_mut(t) {
                *s = if *s > 0.0 {
                    *s / config.repetition_penalty
                } else {
                    *s * config.repetition_penalty
                };
            }
        }
    }
    let mut kill = |t: TokenId| {
        if let Some(s) = scores.get_mut(t) {
            *s = f64::NEG_INFINITY;
        }
    };
    for t in banned_by_ngram(history, config.no_repeat_ngram) {
        kill(t);
    }
    if config.block_eos {
        kill(EOS);
    }
    for &t in banned {
        kill(t);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::ConstraintDeadlock);
    }
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Array::new(dist.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
}
