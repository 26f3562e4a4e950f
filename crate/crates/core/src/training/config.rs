use serde::{Deserialize, Serialize};

use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::synthworld::{TokenId, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Xent,
    Debias,
    Reinforce,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Xent => "xent",
            StageKind::Debias => "debias",
            StageKind::Reinforce => "reinforce",
        }
    }
}

impl std::str::FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xent" => Ok(StageKind::Xent),
            "debias" => Ok(StageKind::Debias),
            "reinforce" => Ok(StageKind::Reinforce),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// One training stage. `stop_mean_length = None` means "twice the mean
/// full-reference length of the training set, capped at the eval
/// decoder's max length".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: StageKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_mean_length: Option<f64>,
    pub probe_every: usize,
    pub seed: u64,
    /// Train only the bridge.
    #[serde(default)]
    pub bridge_only: bool,
    /// Token whose probability the debias step lowers at the EOS emission
    /// step. Anything other than EOS is the wrong-target ablation.
    #[serde(default = "default_eos_target")]
    pub eos_target: TokenId,
    #[serde(default = "DecodeConfig::contrastive")]
    pub decode_config_train: DecodeConfig,
    #[serde(default)]
    pub decode_config_eval: DecodeConfig,
}

fn default_eos_target() -> TokenId {
    EOS
}

impl TrainConfig {
    pub fn xent() -> Self {
        Self {
            stage: StageKind::Xent,
            learning_rate: 0.5,
            batch_size: 8,
            grad_accum_steps: 3,
            max_steps: 3000,
            stop_mean_length: Some(f64::INFINITY),
            probe_every: 500,
            seed: 0,
            bridge_only: false,
            eos_target: EOS,
            decode_config_train: DecodeConfig::contrastive(),
            decode_config_eval: DecodeConfig::default(),
        }
    }

    pub fn debias() -> Self {
        Self {
            stage: StageKind::Debias,
            learning_rate: 0.1,
            max_steps: 2000,
            stop_mean_length: None,
            probe_every: 50,
            ..Self::xent()
        }
    }

    pub fn reinforce() -> Self {
        Self {
            stage: StageKind::Reinforce,
            ..Self::debias()
        }
    }

    pub fn for_stage(stage: StageKind) -> Self {
        match stage {
            StageKind::Xent => Self::xent(),
            StageKind::Debias => Self::debias(),
            StageKind::Reinforce => Self::reinforce(),
        }
    }

    pub fn validate(&self, vocab_size: usize, max_decode_length: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{} stage: {msg}", self.stage.name())));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning-rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad("batch-size and grad-accum-steps must be at least 1".into());
        }
        if self.probe_every == 0 {
            return bad("probe-every must be at least 1".into());
        }
        if let Some(l) = self.stop_mean_length {
            if !(l > 0.0) {
                return bad(format!("stop-mean-length must be positive, got {l}"));
            }
            if l.is_finite() && l > max_decode_length as f64 {
                return bad(format!(
                    "stop-mean-length {l} exceeds the max decode length {max_decode_length}"
                ));
            }
        }
        if self.eos_target >= vocab_size {
            return bad(format!("eos-target {} is outside the vocabulary", self.eos_target));
        }
        for (name, d) in [("decode-config-train", &self.decode_config_train), ("decode-config-eval", &self.decode_config_eval)] {
            d.validate().map_err(|e| Error::Config(format!("{} stage, {name}: {e}", self.stage.name())))?;
            if d.max_length > max_decode_length {
                return bad(format!(
                    "{name}.max-length {} exceeds the model's max decode length {max_decode_length}",
                    d.max_length
                ));
            }
        }
        Ok(())
    }

    /// Samples consumed per optimizer step.
    pub fn samples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for c in [TrainConfig::xent(), TrainConfig::debias(), TrainConfig::reinforce()] {
            c.validate(38, 96).unwrap();
        }
    }

    #[test]
    fn rejects_bad_values() {
        let cases = [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::xent() },
            TrainConfig { batch_size: 0, ..TrainConfig::xent() },
            TrainConfig { probe_every: 0, ..TrainConfig::xent() },
            TrainConfig { stop_mean_length: Some(200.0), ..TrainConfig::debias() },
            TrainConfig { eos_target: 99, ..TrainConfig::debias() },
        ];
        for c in cases {
            assert!(matches!(c.validate(38, 96), Err(Error::Config(_))), "{c:?}");
        }
        let mut c = TrainConfig::debias();
        c.decode_config_eval.top_p = 0.0;
        assert!(c.validate(38, 96).is_err());
    }
}
