use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::constraints::apply_with_mask;
use super::{DecodeConfig, Strategy};
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::model::{Captioner, CaptionerParams, DecoderState};
use crate::rng::{substream, Stream};
use crate::synthworld::{Caption, TokenId, BOS, EOS};

/// A generated caption plus the model's own (unconstrained) probabilities
/// along the chosen path.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub caption: Caption,
    /// Raw model probability of each emitted token.
    pub token_probs: Vec<f64>,
    /// Raw model probability of EOS at each step.
    pub eos_probs: Vec<f64>,
    /// `Σ ln token_probs`.
    pub log_prob: f64,
    /// The score the search ranked by (constrained log-probability for
    /// beam search, equal to `log_prob` when no constraint is active).
    pub score: f64,
}

impl Decoded {
    pub fn len(&self) -> usize {
        self.caption.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caption.is_empty()
    }

    /// Raw p(EOS) at the step EOS was emitted, if it was.
    pub fn eos_emission_prob(&self) -> Option<f64> {
        self.caption.terminated().then(|| *self.token_probs.last().expect("non-empty"))
    }
}

#[derive(Clone)]
struct Path {
    tokens: Vec<TokenId>,
    token_probs: Vec<f64>,
    eos_probs: Vec<f64>,
    score: f64,
}

impl Path {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            token_probs: Vec::new(),
            eos_probs: Vec::new(),
            score: 0.0,
        }
    }

    fn push(&mut self, token: TokenId, raw: &Array, adjusted_p: f64) {
        self.tokens.push(token);
        self.token_probs.push(raw.data()[token]);
        self.eos_probs.push(raw.data().get(EOS).copied().unwrap_or(0.0));
        self.score += adjusted_p.ln();
    }

    fn finish(self) -> Result<Decoded> {
        let log_prob = self.token_probs.iter().map(|p| p.ln()).sum();
        Ok(Decoded {
            caption: Caption::new(self.tokens)?,
            token_probs: self.token_probs,
            eos_probs: self.eos_probs,
            log_prob,
            score: self.score,
        })
    }
}

/// Index of the largest entry, lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by descending probability, lowest index first on ties.
fn ranked(dist: &Array) -> Vec<TokenId> {
    let d = dist.data();
    let mut idx: Vec<TokenId> = (0..d.len()).filter(|&i| d[i] > 0.0).collect();
    idx.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Decodes with the nucleus RNG seeded from `config.rng_seed`.
pub fn decode(model: &Captioner, config: &DecodeConfig) -> Result<Decoded> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    decode_with_rng(model, config, &mut rng)
}

pub fn decode_with_rng<R: Rng>(model: &Captioner, config: &DecodeConfig, rng: &mut R) -> Result<Decoded> {
    config.validate()?;
    match config.strategy {
        Strategy::Greedy => sample_loop(model, config, |dist| argmax(dist.data())),
        Strategy::Nucleus => sample_loop(model, config, |dist| nucleus(dist, config.top_p, rng)),
        Strategy::Contrastive => contrastive(model, config),
        Strategy::Beam => beam(model, config),
    }
}

/// Decodes every feature vector in parallel. Sample `i` gets nucleus
/// stream `i` under `config.rng_seed`, so results do not depend on thread
/// scheduling.
pub fn decode_batch(params: &CaptionerParams, features: &[Array], config: &DecodeConfig) -> Result<Vec<Decoded>> {
    config.validate()?;
    features
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let model = params.conditioned(f)?;
            let mut rng = substream(config.rng_seed, Stream::Rollout, i as u64);
            decode_with_rng(&model, config, &mut rng)
        })
        .collect()
}

fn nucleus<R: Rng>(dist: &Array, top_p: f64, rng: &mut R) -> TokenId {
    let order = ranked(dist);
    let d = dist.data();
    let mut mass = 0.0;
    let mut cut = order.len();
    for (i, &t) in order.iter().enumerate() {
        mass += d[t];
        if mass >= top_p {
            cut = i + 1;
            break;
        }
    }
    let kept = &order[..cut];
    let total: f64 = kept.iter().map(|&t| d[t]).sum();
    let mut u = rng.random::<f64>() * total;
    for &t in kept {
        u -= d[t];
        if u < 0.0 {
            return t;
        }
    }
    *kept.last().expect("nucleus is never empty")
}

/// Shared loop for strategies that pick one token per step from the
/// constrained distribution.
fn sample_loop<F>(model: &Captioner, config: &DecodeConfig, mut pick: F) -> Result<Decoded>
where
    F: FnMut(&Array) -> TokenId,
{
    let mut path = Path::new();
    let (mut state, mut raw) = model.step(&model.start, BOS)?;
    loop {
        let dist = apply_with_mask(&raw, &path.tokens, config, &model.banned)?;
        let t = pick(&dist);
        path.push(t, &raw, dist.data()[t]);
        if t == EOS || path.tokens.len() >= config.max_length {
            return path.finish();
        }
        (state, raw) = model.step(&state, t)?;
    }
}

/// Top-k candidates re-ranked by `(1 - α) p - α max_j cos(h_cand, h_j)`
/// over all previous decoder states.
fn contrastive(model: &Captioner, config: &DecodeConfig) -> Result<Decoded> {
    let alpha = config.contrastive_alpha;
    let mut path = Path::new();
    let (mut state, mut raw) = model.step(&model.start, BOS)?;
    let mut context: Vec<Array> = vec![model.start.hidden.clone(), state.hidden.clone()];
    loop {
        let dist = apply_with_mask(&raw, &path.tokens, config, &model.banned)?;
        let candidates: Vec<TokenId> = ranked(&dist).into_iter().take(config.contrastive_k).collect();
        let mut best: Option<(f64, TokenId, DecoderState, Array)> = None;
        for &c in &candidates {
            let (next, next_raw) = model.step(&state, c)?;
            let penalty = context
                .iter()
                .map(|h| cosine(next.hidden.data(), h.data()))
                .fold(f64::NEG_INFINITY, f64::max);
            let score = (1.0 - alpha) * dist.data()[c] - alpha * penalty;
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, c, next, next_raw));
            }
        }
        let (_, t, next, next_raw) = best.ok_or(Error::ConstraintDeadlock)?;
        path.push(t, &raw, dist.data()[t]);
        if t == EOS || path.tokens.len() >= config.max_length {
            return path.finish();
        }
        context.push(next.hidden.clone());
        state = next;
        raw = next_raw;
    }
}

/// Adds to the finished pool, evicting the worst entry (latest on ties)
/// beyond `width`.
fn offer(pool: &mut Vec<Path>, path: Path, width: usize) {
    pool.push(path);
    if pool.len() > width {
        let mut worst = 0;
        for (i, p) in pool.iter().enumerate() {
            if p.score <= pool[worst].score {
                worst = i;
            }
        }
        pool.remove(worst);
    }
}

struct Hyp {
    path: Path,
    state: DecoderState,
    raw: Array,
}

/// Beam search on summed constrained log-probabilities, no length
/// normalisation. Hypotheses that emit EOS move to a finished pool that
/// keeps the best `beam_width` entries; the search stops once that pool is
/// full and no live hypothesis scores above its worst entry.
fn beam(model: &Captioner, config: &DecodeConfig) -> Result<Decoded> {
    let width = config.beam_width;
    let (state, raw) = model.step(&model.start, BOS)?;
    let mut live = vec![Hyp {
        path: Path::new(),
        state,
        raw,
    }];
    let mut finished: Vec<Path> = Vec::new();
    let mut deadlock = false;
    for step in 0..config.max_length {
        let mut cands: Vec<(f64, usize, TokenId, f64)> = Vec::new();
        let mut any_ok = false;
        for (hi, h) in live.iter().enumerate() {
            let dist = match apply_with_mask(&h.raw, &h.path.tokens, config, &model.banned) {
                Ok(d) => d,
                Err(Error::ConstraintDeadlock) => continue,
                Err(e) => return Err(e),
            };
            any_ok = true;
            for (t, &p) in dist.data().iter().enumerate() {
                if p > 0.0 {
                    cands.push((h.path.score + p.ln(), hi, t, p));
                }
            }
        }
        if !any_ok {
            deadlock = true;
            break;
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let last_step = step + 1 == config.max_length;
        let mut next_live = Vec::with_capacity(width);
        for (rank, &(_, hi, t, p)) in cands.iter().enumerate() {
            if next_live.len() >= width {
                break;
            }
            let h = &live[hi];
            let mut path = h.path.clone();
            path.push(t, &h.raw, p);
            if t == EOS {
                if rank < width {
                    offer(&mut finished, path, width);
                }
            } else if last_step {
                offer(&mut finished, path, width);
                next_live.push(None);
            } else {
                let (state, raw) = model.step(&h.state, t)?;
                next_live.push(Some(Hyp { path, state, raw }));
            }
        }
        live = next_live.into_iter().flatten().collect();
        if live.is_empty() {
            break;
        }
        let worst_finished = finished.iter().map(|p| p.score).fold(f64::INFINITY, f64::min);
        let best_live = live.iter().map(|h| h.path.score).fold(f64::NEG_INFINITY, f64::max);
        if finished.len() >= width && best_live <= worst_finished {
            break;
        }
    }
    let best = finished.into_iter().enumerate().max_by(|(ia, a), (ib, b)| {
        a.score
            .partial_cmp(&b.score)
            .unwrap_or(Ordering::Equal)
            .then(ib.cmp(ia))
    });
    match best {
        Some((_, path)) => path.finish(),
        None if deadlock => Err(Error::ConstraintDeadlock),
        None => {
            // Live hypotheses remain only if the loop ran out of steps
            // without finishing any; that cannot happen because the last
            // step finishes everything.
            Err(Error::Contract("beam search produced no hypothesis".into()))
        }
    }
}
