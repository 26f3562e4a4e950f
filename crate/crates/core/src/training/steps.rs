use rayon::prelude::*;

use crate::autodiff::{Array, Graph, Tape};
use crate::decoding::{decode_batch, DecodeConfig, Decoded};
use crate::error::{Error, Result};
use crate::model::{teacher_forced_graph, log_prob_graph, CaptionerParams, ParamGrads};
use crate::synthworld::{Caption, TokenId, BOS, EOS};

/// A feature vector with a reference caption.
pub type Pair<'d> = (&'d Array, &'d Caption);

fn reference_targets(caption: &Caption) -> Result<&[TokenId]> {
    if !caption.terminated() {
        return Err(Error::Data(format!(
            "reference `{}` is not terminated with EOS",
            caption.render()
        )));
    }
    let toks = caption.tokens();
    Ok(if toks.first() == Some(&BOS) { &toks[1..] } else { toks })
}

/// Sums per-sample gradients in input order, so the result does not
/// depend on how the parallel map was scheduled.
fn ordered_sum(params: &CaptionerParams, parts: Vec<ParamGrads>) -> Result<ParamGrads> {
    let mut total = ParamGrads::zeros(&params.dims);
    for g in &parts {
        total.add_scaled(g, 1.0)?;
    }
    Ok(total)
}

/// Mean per-token cross-entropy of one reference under teacher forcing,
/// with its gradient.
pub fn xent_loss_grad(params: &CaptionerParams, features: &Array, reference: &Caption) -> Result<(f64, ParamGrads)> {
    let targets = reference_targets(reference)?;
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape);
    let f = tape.input(features);
    let lp = log_prob_graph(&mut tape, &vars, &f, targets)?;
    let loss = tape.scale(&lp, -1.0 / targets.len() as f64);
    let value = tape.value(&loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, ParamGrads::from_tape(&grads, &vars, &params.dims)))
}

/// Batch-mean cross-entropy and its gradient.
pub fn xent_batch_grad(params: &CaptionerParams, batch: &[Pair]) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty cross-entropy batch".into()));
    }
    let parts: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|(f, c)| xent_loss_grad(params, f, c))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / n;
    let mut grads = ordered_sum(params, parts.into_iter().map(|(_, g)| g).collect())?;
    grads.scale(1.0 / n);
    Ok((loss, grads))
}

/// One optimizer step over `micro_batches` (gradient accumulation): the
/// update uses the mean gradient over every sample. Returns the mean loss.
pub fn xent_step(params: &mut CaptionerParams, micro_batches: &[Vec<Pair>], learning_rate: f64) -> Result<f64> {
    let all: Vec<Pair> = micro_batches.iter().flatten().copied().collect();
    let (loss, grads) = xent_batch_grad(params, &all)?;
    params.sgd_update(&grads, learning_rate)?;
    Ok(loss)
}

/// `log p(target | prefix, features)` where `prefix` excludes BOS, with its
/// gradient. The prefix is treated as fixed context.
pub fn next_token_log_prob_grad(
    params: &CaptionerParams,
    features: &Array,
    prefix: &[TokenId],
    target: TokenId,
) -> Result<(f64, ParamGrads)> {
    let mut tokens = prefix.to_vec();
    tokens.push(target);
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape);
    let f = tape.input(features);
    let dists = teacher_forced_graph(&mut tape, &vars, &f, &tokens)?;
    let last = dists.last().expect("at least the target position");
    let p = tape.pick(last, target)?;
    let lp = tape.log(&p);
    let value = tape.value(&lp).item()?;
    let grads = tape.backward(lp)?;
    Ok((value, ParamGrads::from_tape(&grads, &vars, &params.dims)))
}

/// What one debias step saw before updating.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DebiasTelemetry {
    pub rollouts: usize,
    pub terminated: usize,
    pub skipped_empty: usize,
    pub mean_length: f64,
    /// Mean raw p(EOS) at the emission step over terminated rollouts.
    pub p_eos: f64,
    /// Mean raw probability of every emitted non-EOS token.
    pub p_ros: f64,
}

/// p(EOS) and ROS summaries over a set of decodes.
pub fn eos_ros(decoded: &[Decoded]) -> (f64, f64) {
    let emitted: Vec<f64> = decoded.iter().filter_map(Decoded::eos_emission_prob).collect();
    let p_eos = if emitted.is_empty() {
        0.0
    } else {
        emitted.iter().sum::<f64>() / emitted.len() as f64
    };
    let mut ros_sum = 0.0;
    let mut ros_n = 0usize;
    for d in decoded {
        for (t, p) in d.caption.tokens().iter().zip(&d.token_probs) {
            if *t != EOS {
                ros_sum += p;
                ros_n += 1;
            }
        }
    }
    let p_ros = if ros_n == 0 { 0.0 } else { ros_sum / ros_n as f64 };
    (p_eos, p_ros)
}

/// Gradient of the batch-mean `log p(target at the EOS emission step)`.
/// Truncated rollouts add nothing but still count in the mean.
pub fn debias_gradient(
    params: &CaptionerParams,
    features: &[&Array],
    rollouts: &[Decoded],
    target: TokenId,
) -> Result<(ParamGrads, DebiasTelemetry)> {
    if features.len() != rollouts.len() {
        return Err(Error::Contract("one rollout per feature vector expected".into()));
    }
    let parts: Vec<Option<ParamGrads>> = features
        .par_iter()
        .zip(rollouts.par_iter())
        .map(|(f, r)| {
            if !r.caption.terminated() {
                return Ok(None);
            }
            let toks = r.caption.tokens();
            let (_, g) = next_token_log_prob_grad(params, f, &toks[..toks.len() - 1], target)?;
            Ok(Some(g))
        })
        .collect::<Result<_>>()?;
    let n = rollouts.len();
    let mut grads = ordered_sum(params, parts.into_iter().flatten().collect())?;
    if n > 0 {
        grads.scale(1.0 / n as f64);
    }
    let (p_eos, p_ros) = eos_ros(rollouts);
    let telemetry = DebiasTelemetry {
        rollouts: n,
        terminated: rollouts.iter().filter(|r| r.caption.terminated()).count(),
        skipped_empty: rollouts.iter().filter(|r| r.is_empty()).count(),
        mean_length: if n == 0 {
            0.0
        } else {
            rollouts.iter().map(|r| crate::metrics::caption_length(&r.caption) as f64).sum::<f64>() / n as f64
        },
        p_eos,
        p_ros,
    };
    Ok((grads, telemetry))
}

/// Rolls out every feature vector with `decode`, then descends on the mean
/// `log p(target)` at each terminated rollout's EOS step.
pub fn eos_debias_step(
    params: &mut CaptionerParams,
    features: &[&Array],
    decode: &DecodeConfig,
    target: TokenId,
    learning_rate: f64,
) -> Result<DebiasTelemetry> {
    let owned: Vec<Array> = features.iter().map(|f| (*f).clone()).collect();
    let rollouts = decode_batch(params, &owned, decode)?;
    let (grads, telemetry) = debias_gradient(params, features, &rollouts, target)?;
    if telemetry.skipped_empty > 0 {
        log::warn!("{} empty rollouts skipped", telemetry.skipped_empty);
    }
    params.sgd_update(&grads, learning_rate)?;
    Ok(telemetry)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReinforceTelemetry {
    pub rollouts: usize,
    pub skipped_non_finite: usize,
    pub mean_reward: f64,
    pub mean_length: f64,
}

/// Score-function gradient of the loss `-(1/n) Σ_i R(S) log p(t_i)`,
/// averaged over the batch. Samples with a non-finite reward are skipped
/// (and excluded from the mean).
pub fn reinforce_gradient(
    params: &CaptionerParams,
    features: &[&Array],
    rollouts: &[Caption],
    rewards: &[f64],
) -> Result<(ParamGrads, usize)> {
    if features.len() != rollouts.len() || rollouts.len() != rewards.len() {
        return Err(Error::Contract("features, rollouts and rewards must align".into()));
    }
    let parts: Vec<Option<ParamGrads>> = features
        .par_iter()
        .zip(rollouts.par_iter())
        .zip(rewards.par_iter())
        .map(|((f, c), &r)| {
            if !r.is_finite() || c.is_empty() {
                return Ok(None);
            }
            let (_, mut g) = params.sequence_log_prob_grad(f, c)?;
            g.scale(-r / c.len() as f64);
            Ok(Some(g))
        })
        .collect::<Result<_>>()?;
    let used = parts.iter().filter(|p| p.is_some()).count();
    let skipped = parts.len() - used;
    let mut grads = ordered_sum(params, parts.into_iter().flatten().collect())?;
    if used > 0 {
        grads.scale(1.0 / used as f64);
    }
    Ok((grads, skipped))
}

/// Rolls out, scores each rollout with `reward(index, caption)`, and
/// descends on the score-function loss.
pub fn reinforce_step<R>(
    params: &mut CaptionerParams,
    features: &[&Array],
    reward: R,
    decode: &DecodeConfig,
    learning_rate: f64,
) -> Result<ReinforceTelemetry>
where
    R: Fn(usize, &Caption) -> f64 + Sync,
{
    let owned: Vec<Array> = features.iter().map(|f| (*f).clone()).collect();
    let rollouts: Vec<Caption> = decode_batch(params, &owned, decode)?
        .into_iter()
        .map(|d| d.caption)
        .collect();
    let rewards: Vec<f64> = rollouts.iter().enumerate().map(|(i, c)| reward(i, c)).collect();
    let (grads, skipped) = reinforce_gradient(params, features, &rollouts, &rewards)?;
    if skipped > 0 {
        log::warn!("{skipped} rollouts with non-finite reward skipped");
    }
    params.sgd_update(&grads, learning_rate)?;
    let finite: Vec<f64> = rewards.iter().copied().filter(|r| r.is_finite()).collect();
    Ok(ReinforceTelemetry {
        rollouts: rollouts.len(),
        skipped_non_finite: skipped,
        mean_reward: if finite.is_empty() {
            0.0
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        mean_length: rollouts.iter().map(|c| crate::metrics::caption_length(c) as f64).sum::<f64>()
            / rollouts.len().max(1) as f64,
    })
}

/// Raw p(EOS) right after the teacher-forced `prefix` (BOS excluded).
pub fn eos_prob_after(params: &CaptionerParams, features: &Array, prefix: &[TokenId]) -> Result<f64> {
    let mut state = params.encode(features)?;
    let mut prev = BOS;
    for &t in prefix {
        state = params.decode_step(&state, prev)?.0;
        prev = t;
    }
    let (_, dist) = params.decode_step(&state, prev)?;
    Ok(dist.data()[EOS])
}
