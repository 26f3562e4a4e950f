//! Toy conditional captioner: a linear+tanh bridge from scene features to
//! the initial hidden state, and a GRU-style recurrent decoder.
//!
//! ```text
//! h0  = tanh(f W_b + b_b)
//! x   = E[prev]
//! z   = sigmoid([x, h] W_z + b_z)
//! r   = sigmoid([x, h] W_r + b_r)
//! c   = tanh([x, r * h] W_c + b_c)
//! h'  = h + z * (c - h)
//! p   = softmax(h' W_o + b_o)
//! ```
//!
//! Every forward function is written against [`Graph`], so the same code
//! yields plain values (on [`Eager`]) or a differentiable tape.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{
    CaptionerParams, FrozenMask, ModelDims, ParamGrads, ParamGroup, ParamVars, TENSOR_COUNT,
    TENSOR_GROUPS, TENSOR_NAMES,
};

use crate::autodiff::{Array, Eager, Graph, Tape};
use crate::error::{Error, Result};
use crate::synthworld::{Caption, TokenId, Vocabulary, BOS, FEATURE_DIM, PAD};

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const MAX_DECODE_LENGTH: usize = 96;

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            feature_dim: FEATURE_DIM,
            vocab_size: Vocabulary::standard().len(),
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub hidden: Array,
    pub steps: usize,
}

/// Initial hidden state from features.
pub fn encode_graph<'a, G: Graph<'a>>(
    g: &mut G,
    p: &ParamVars<G::Var>,
    features: &G::Var,
) -> Result<G::Var> {
    let pre = g.matmul(features, &p.bridge_w)?;
    let pre = g.add_bias(&pre, &p.bridge_b)?;
    Ok(g.tanh(&pre))
}

/// One decoder step; returns the new hidden state and the next-token
/// distribution.
pub fn step_graph<'a, G: Graph<'a>>(
    g: &mut G,
    p: &ParamVars<G::Var>,
    hidden: &G::Var,
    prev: TokenId,
) -> Result<(G::Var, G::Var)> {
    let x = g.gather(&p.embedding, prev)?;
    let xh = g.concat(&x, hidden)?;
    let z = g.matmul(&xh, &p.update_w)?;
    let z = g.add_bias(&z, &p.update_b)?;
    let z = g.sigmoid(&z);
    let r = g.matmul(&xh, &p.reset_w)?;
    let r = g.add_bias(&r, &p.reset_b)?;
    let r = g.sigmoid(&r);
    let rh = g.mul(&r, hidden)?;
    let xrh = g.concat(&x, &rh)?;
    let c = g.matmul(&xrh, &p.cand_w)?;
    let c = g.add_bias(&c, &p.cand_b)?;
    let c = g.tanh(&c);
    let delta = g.sub(&c, hidden)?;
    let delta = g.mul(&z, &delta)?;
    let next = g.add(hidden, &delta)?;
    let logits = g.matmul(&next, &p.out_w)?;
    let logits = g.add_bias(&logits, &p.out_b)?;
    let dist = g.softmax(&logits)?;
    Ok((next, dist))
}

/// Distributions for each position of `tokens` under teacher forcing:
/// entry `i` is `p(. | BOS, tokens[..i], features)`.
pub fn teacher_forced_graph<'a, G: Graph<'a>>(
    g: &mut G,
    p: &ParamVars<G::Var>,
    features: &G::Var,
    tokens: &[TokenId],
) -> Result<Vec<G::Var>> {
    let mut hidden = encode_graph(g, p, features)?;
    let mut prev = BOS;
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let (next, dist) = step_graph(g, p, &hidden, prev)?;
        out.push(dist);
        hidden = next;
        prev = t;
    }
    Ok(out)
}

/// Sum of `log p(t_i | t_<i)` over a token sequence.
pub fn log_prob_graph<'a, G: Graph<'a>>(
    g: &mut G,
    p: &ParamVars<G::Var>,
    features: &G::Var,
    tokens: &[TokenId],
) -> Result<G::Var> {
    if tokens.is_empty() {
        return Err(Error::Contract("log-prob of an empty caption".into()));
    }
    let dists = teacher_forced_graph(g, p, features, tokens)?;
    let mut total: Option<G::Var> = None;
    for (dist, &t) in dists.iter().zip(tokens) {
        let pt = g.pick(dist, t)?;
        let lp = g.log(&pt);
        total = Some(match total {
            None => lp,
            Some(acc) => g.add(&acc, &lp)?,
        });
    }
    Ok(total.expect("non-empty"))
}

impl CaptionerParams {
    fn check_features(&self, features: &Array) -> Result<()> {
        if features.shape() != [self.dims.feature_dim] {
            return Err(Error::Contract(format!(
                "features have shape {:?}, expected [{}]",
                features.shape(),
                self.dims.feature_dim
            )));
        }
        Ok(())
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token >= self.dims.vocab_size {
            return Err(Error::Index {
                index: token,
                len: self.dims.vocab_size,
            });
        }
        Ok(())
    }

    pub fn encode(&self, features: &Array) -> Result<DecoderState> {
        self.check_features(features)?;
        let mut g = Eager;
        let vars = self.vars(&mut g);
        let f = g.input(features);
        let hidden = encode_graph(&mut g, &vars, &f)?;
        Ok(DecoderState {
            hidden: hidden.into_owned(),
            steps: 0,
        })
    }

    pub fn decode_step(&self, state: &DecoderState, prev: TokenId) -> Result<(DecoderState, Array)> {
        self.check_token(prev)?;
        let mut g = Eager;
        let vars = self.vars(&mut g);
        let hidden = g.input(&state.hidden);
        let (next, dist) = step_graph(&mut g, &vars, &hidden, prev)?;
        Ok((
            DecoderState {
                hidden: next.into_owned(),
                steps: state.steps + 1,
            },
            dist.into_owned(),
        ))
    }

    /// `Σ log p(t_i | t_<i, features)` for the caption's tokens (a leading
    /// BOS, if present, is context rather than a target).
    pub fn sequence_log_prob(&self, features: &Array, caption: &Caption) -> Result<f64> {
        let tokens = targets(caption);
        self.check_features(features)?;
        for &t in tokens {
            self.check_token(t)?;
        }
        let mut g = Eager;
        let vars = self.vars(&mut g);
        let f = g.input(features);
        log_prob_graph(&mut g, &vars, &f, tokens)?.item()
    }

    /// Value and parameter gradient of [`Self::sequence_log_prob`].
    pub fn sequence_log_prob_grad(&self, features: &Array, caption: &Caption) -> Result<(f64, ParamGrads)> {
        let tokens = targets(caption);
        self.check_features(features)?;
        for &t in tokens {
            self.check_token(t)?;
        }
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape);
        let f = tape.input(features);
        let root = log_prob_graph(&mut tape, &vars, &f, tokens)?;
        let value = tape.value(&root).item()?;
        let grads = tape.backward(root)?;
        Ok((value, ParamGrads::from_tape(&grads, &vars, &self.dims)))
    }

    /// Binds features to the parameters for step-wise generation.
    pub fn conditioned<'p>(&'p self, features: &Array) -> Result<Captioner<'p>> {
        Ok(Captioner {
            params: self,
            start: self.encode(features)?,
            banned: vec![PAD, BOS],
        })
    }
}

fn targets(caption: &Caption) -> &[TokenId] {
    match caption.tokens() {
        [first, rest @ ..] if *first == BOS => rest,
        all => all,
    }
}

/// Parameters plus an encoded input: the unit the decoders run against.
#[derive(Clone, Debug)]
pub struct Captioner<'p> {
    pub params: &'p CaptionerParams,
    pub start: DecoderState,
    /// Tokens that may never be generated.
    pub banned: Vec<TokenId>,
}

impl Captioner<'_> {
    pub fn vocab_size(&self) -> usize {
        self.params.dims.vocab_size
    }

    pub fn step(&self, state: &DecoderState, prev: TokenId) -> Result<(DecoderState, Array)> {
        self.params.decode_step(state, prev)
    }
}

/// Mean per-step entropy (nats) of `dists`.
pub fn mean_entropy(dists: &[Array]) -> f64 {
    if dists.is_empty() {
        return 0.0;
    }
    let total: f64 = dists
        .iter()
        .map(|d| {
            -d.data()
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / dists.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{
        generate_scene, render_features, Cell, Category, Color, ObjectInstance, Scene, SceneConfig, Size, EOS,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture_scene() -> Scene {
        let obj = |cat: u8, color: u8, size: Size, cell: u8| ObjectInstance {
            category: Category(cat),
            color: Color(color),
            size,
            position: Cell(cell),
        };
        Scene::from_objects(
            0,
            vec![obj(0, 0, Size::Small, 0), obj(1, 2, Size::Large, 4), obj(6, 5, Size::Medium, 8)],
        )
        .unwrap()
    }

    fn toy_dims(v: usize) -> ModelDims {
        ModelDims {
            feature_dim: 3,
            vocab_size: v,
            embed_dim: 2,
            hidden_dim: 3,
        }
    }

    fn scrambled(seed: u64, dims: ModelDims, scale: f64) -> CaptionerParams {
        let mut p = CaptionerParams::init(seed, dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
        p
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let dims = ModelDims::default();
        let a = CaptionerParams::init(0, dims).unwrap();
        assert_eq!(a, CaptionerParams::init(0, dims).unwrap());
        assert_ne!(a, CaptionerParams::init(1, dims).unwrap());
        for (t, name) in a.tensors().iter().zip(TENSOR_NAMES) {
            assert!(t.data().iter().all(|v| v.abs() <= 0.08));
            if name.ends_with("gate.bias") || name == "candidate.bias" {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let bad = ModelDims {
            hidden_dim: 0,
            ..dims
        };
        assert!(CaptionerParams::init(0, bad).is_err());
    }

    #[test]
    fn zero_features_zero_bias_give_zero_hidden() {
        let mut p = CaptionerParams::init(0, ModelDims::default()).unwrap();
        p.tensor_mut("bridge.bias").unwrap().data_mut().fill(0.0);
        let s = p.encode(&Array::zeros(&[FEATURE_DIM])).unwrap();
        assert!(s.hidden.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.steps, 0);
        assert!(matches!(p.encode(&Array::zeros(&[3])), Err(Error::Contract(_))));
    }

    #[test]
    fn golden_hidden_for_fixture_scene() {
        let p = CaptionerParams::init(0, ModelDims::default()).unwrap();
        let f = render_features(&fixture_scene(), 0.0);
        let s = p.encode(&f).unwrap();
        assert_eq!(s, p.encode(&f).unwrap());
        // Independent recomputation: h_j = tanh(b_j + sum over active features of W[i, j]).
        let w = p.tensor("bridge.weight").unwrap();
        let b = p.tensor("bridge.bias").unwrap();
        let h = p.dims.hidden_dim;
        for j in 0..h {
            let mut acc = b.data()[j];
            for (i, &x) in f.data().iter().enumerate() {
                if x != 0.0 {
                    acc += x * w.data()[i * h + j];
                }
            }
            assert!((s.hidden.data()[j] - acc.tanh()).abs() < 1e-15);
        }
        let head: Vec<String> = s.hidden.data()[..4].iter().map(|v| format!("{v:.12}")).collect();
        assert_eq!(head, GOLDEN_HIDDEN_HEAD);
    }

    const GOLDEN_HIDDEN_HEAD: [&str; 4] = ["-0.272998934132", "-0.063547349354", "0.029810582797", "-0.174465915741"];

    #[test]
    fn decode_step_distribution() {
        let p = CaptionerParams::init(3, ModelDims::default()).unwrap();
        let f = render_features(&generate_scene(5, &SceneConfig::default()).unwrap(), 0.0);
        let s0 = p.encode(&f).unwrap();
        let (s1, d) = p.decode_step(&s0, BOS).unwrap();
        assert!((d.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s1.steps, 1);
        let (s1b, db) = p.decode_step(&s0, BOS).unwrap();
        assert_eq!(s1, s1b);
        let bits = |a: &Array| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&d), bits(&db));
        assert!(matches!(p.decode_step(&s0, 38), Err(Error::Index { .. })));
    }

    #[test]
    fn eos_logit_ten_dominates() {
        let mut p = CaptionerParams::init(0, ModelDims::default()).unwrap();
        p.tensor_mut("output.weight").unwrap().data_mut().fill(0.0);
        let b = p.tensor_mut("output.bias").unwrap();
        b.data_mut().fill(0.0);
        b.data_mut()[EOS] = 10.0;
        let s = p.encode(&Array::zeros(&[FEATURE_DIM])).unwrap();
        let (_, d) = p.decode_step(&s, BOS).unwrap();
        let analytic = 10f64.exp() / (10f64.exp() + 37.0);
        assert!((d.data()[EOS] - analytic).abs() < 1e-12);
        assert!(d.data()[EOS] > 0.998);

        // Below 24 tokens the same logit gap clears 0.999.
        let mut small = CaptionerParams::init(0, toy_dims(20)).unwrap();
        small.tensor_mut("output.weight").unwrap().data_mut().fill(0.0);
        let b = small.tensor_mut("output.bias").unwrap();
        b.data_mut().fill(0.0);
        b.data_mut()[EOS] = 10.0;
        let s = small.encode(&Array::zeros(&[3])).unwrap();
        let (_, d) = small.decode_step(&s, BOS).unwrap();
        assert!(d.data()[EOS] > 0.999);
    }

    #[test]
    fn single_token_log_prob_and_chain_rule() {
        let p = scrambled(9, toy_dims(5), 0.9);
        let f = Array::vector(vec![0.3, -0.2, 0.7]);
        let s0 = p.encode(&f).unwrap();
        let (s1, d1) = p.decode_step(&s0, BOS).unwrap();
        let one = Caption::new(vec![3]).unwrap();
        assert!((p.sequence_log_prob(&f, &one).unwrap() - d1.data()[3].ln()).abs() < 1e-14);
        let (_, d2) = p.decode_step(&s1, 3).unwrap();
        let two = Caption::new(vec![3, 4]).unwrap();
        let expect = d1.data()[3].ln() + d2.data()[4].ln();
        assert!((p.sequence_log_prob(&f, &two).unwrap() - expect).abs() < 1e-14);
        let with_bos = Caption::new(vec![BOS, 3, 4]).unwrap();
        assert_eq!(
            p.sequence_log_prob(&f, &with_bos).unwrap(),
            p.sequence_log_prob(&f, &two).unwrap()
        );
    }

    #[test]
    fn enumeration_marginalises_to_one() {
        // Summing p over every length-L sequence must give 1 for each L, and
        // the prefix marginal must equal the prefix probability.
        let v = 4;
        for seed in 0..5 {
            let p = scrambled(seed, toy_dims(v), 1.5);
            let f = Array::vector(vec![1.0, -0.5, 0.25]);
            for len in 1..=3u32 {
                let mut total = 0.0;
                for code in 0..v.pow(len) {
                    let seq: Vec<usize> = (0..len).map(|i| code / v.pow(i) % v).collect();
                    // EOS may only be terminal in a Caption, so sequences with
                    // an inner EOS are only scored step-wise.
                    total += stepwise_prob(&p, &f, &seq);
                    if !seq[..seq.len() - 1].contains(&EOS) && !seq.contains(&BOS) {
                        let lp = p.sequence_log_prob(&f, &Caption::new(seq.clone()).unwrap()).unwrap();
                        assert!((lp.exp() - stepwise_prob(&p, &f, &seq)).abs() < 1e-14);
                    }
                }
                assert!((total - 1.0).abs() < 1e-12, "seed {seed} len {len}: {total}");
            }
        }
    }

    fn stepwise_prob(p: &CaptionerParams, f: &Array, seq: &[usize]) -> f64 {
        let mut s = p.encode(f).unwrap();
        let mut prev = BOS;
        let mut prob = 1.0;
        for &t in seq {
            let (n, d) = p.decode_step(&s, prev).unwrap();
            prob *= d.data()[t];
            s = n;
            prev = t;
        }
        prob
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let p = scrambled(4, toy_dims(6), 0.7);
        let f = Array::vector(vec![0.5, -1.0, 0.2]);
        let cap = Caption::new(vec![3, 5, 4, EOS]).unwrap();
        let (value, grads) = p.sequence_log_prob_grad(&f, &cap).unwrap();
        assert_eq!(value, p.sequence_log_prob(&f, &cap).unwrap());
        let h = 1e-5;
        for (k, g) in grads.tensors.iter().enumerate() {
            let mut numeric = Vec::new();
            for i in 0..g.len() {
                let mut q = p.clone();
                q.tensors_mut()[k].data_mut()[i] += h;
                let up = q.sequence_log_prob(&f, &cap).unwrap();
                q.tensors_mut()[k].data_mut()[i] -= 2.0 * h;
                let down = q.sequence_log_prob(&f, &cap).unwrap();
                numeric.push((up - down) / (2.0 * h));
            }
            let diff: f64 = numeric.iter().zip(g.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.norm().max(1e-8);
            assert!(diff / scale < 1e-4, "{}: {}", TENSOR_NAMES[k], diff / scale);
        }
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let mut p = CaptionerParams::init(1, toy_dims(5)).unwrap();
        p.frozen = FrozenMask::bridge_only();
        let before = p.clone();
        let f = Array::vector(vec![0.5, -1.0, 0.2]);
        let (_, grads) = p.sequence_log_prob_grad(&f, &Caption::new(vec![3, EOS]).unwrap()).unwrap();
        p.sgd_update(&grads, 0.5).unwrap();
        for (k, group) in TENSOR_GROUPS.iter().enumerate() {
            let same = p.tensors()[k] == before.tensors()[k];
            assert_eq!(same, *group != ParamGroup::Bridge, "{}", TENSOR_NAMES[k]);
        }
    }

    #[test]
    fn untrained_entropy_is_near_uniform() {
        let p = CaptionerParams::init(0, ModelDims::default()).unwrap();
        let cfg = SceneConfig::default();
        let mut dists = Vec::new();
        for seed in 0..50 {
            let f = render_features(&generate_scene(seed, &cfg).unwrap(), 0.0);
            let mut s = p.encode(&f).unwrap();
            let mut prev = BOS;
            for _ in 0..8 {
                let (n, d) = p.decode_step(&s, prev).unwrap();
                prev = d.data().iter().enumerate().skip(3).fold((3, 0.0), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0;
                dists.push(d);
                s = n;
            }
        }
        let ln_v = (p.dims.vocab_size as f64).ln();
        let h = mean_entropy(&dists);
        assert!((h - ln_v).abs() / ln_v < 0.15, "entropy {h} vs ln V {ln_v}");
    }
}
