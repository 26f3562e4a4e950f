//! Generation strategies (greedy, beam, contrastive, nucleus) and the
//! constraints that compose with all of them.

mod constraints;
mod search;

pub use constraints::{apply_constraints, banned_by_ngram};
pub use search::{decode, decode_batch, decode_with_rng, Decoded};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MAX_DECODE_LENGTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Beam,
    Contrastive,
    Nucleus,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "contrastive" => Ok(Strategy::Contrastive),
            "nucleus" => Ok(Strategy::Nucleus),
            other => Err(Error::Config(format!("unknown decoding strategy `{other}`"))),
        }
    }
}

/// Defaults are the evaluation setting: beam 5, repetition penalty 1.5,
/// trigram blocking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub repetition_penalty: f64,
    pub no_repeat_ngram: usize,
    pub block_eos: bool,
    pub contrastive_alpha: f64,
    pub contrastive_k: usize,
    pub top_p: f64,
    pub max_length: usize,
    pub rng_seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width: 5,
            repetition_penalty: 1.5,
            no_repeat_ngram: 3,
            block_eos: false,
            contrastive_alpha: 0.7,
            contrastive_k: 5,
            top_p: 0.9,
            max_length: MAX_DECODE_LENGTH,
            rng_seed: 0,
        }
    }
}

impl DecodeConfig {
    /// Unconstrained greedy decoding.
    pub fn greedy(max_length: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            repetition_penalty: 1.0,
            no_repeat_ngram: 0,
            max_length,
            ..Self::default()
        }
    }

    /// Contrastive search with the training-rollout defaults.
    pub fn contrastive() -> Self {
        Self {
            strategy: Strategy::Contrastive,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.beam_width == 0 {
            return bad("beam-width must be at least 1".into());
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return bad(format!(
                "repetition-penalty must be finite and >= 1, got {}",
                self.repetition_penalty
            ));
        }
        if !(0.0..=1.0).contains(&self.contrastive_alpha) {
            return bad(format!("contrastive-alpha must be in [0, 1], got {}", self.contrastive_alpha));
        }
        if self.contrastive_k == 0 {
            return bad("contrastive-k must be at least 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top-p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_length == 0 {
            return bad("max-length must be at least 1".into());
        }
        Ok(())
    }
}
