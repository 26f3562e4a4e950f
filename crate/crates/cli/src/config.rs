//! Experiment configuration file.
//!
//! TOML with kebab-case keys that mirror the library's field names. Stage
//! sections are merged key by key over that stage's preset, so a file only
//! needs the values it changes:
//!
//! ```toml
//! seed = 0
//! output-dir = "runs/default"
//!
//! [data]
//! train-size = 10000
//!
//! [debias]
//! learning-rate = 0.1
//! decode-config-train = { top-p = 0.8 }
//! ```

use std::path::{Path, PathBuf};

use eoslab::decoding::DecodeConfig;
use eoslab::model::{ModelDims, MAX_DECODE_LENGTH};
use eoslab::synthworld::SceneConfig;
use eoslab::training::{StageKind, TrainConfig};
use eoslab::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const OUTPUT_DIR_ENV: &str = "EOSLAB_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub probe_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 10_000,
            val_size: 1_000,
            probe_size: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub xent: TrainConfig,
    pub debias: TrainConfig,
    pub reinforce: TrainConfig,
    pub eval_decoding: DecodeConfig,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default)]
    scene: SceneConfig,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    xent: Table,
    #[serde(default)]
    debias: Table,
    #[serde(default)]
    reinforce: Table,
    #[serde(default)]
    eval_decoding: DecodeConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Recursively overlays `patch` on `base`.
fn merge(base: &mut Table, patch: Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn stage_config(kind: StageKind, seed: u64, section: Table) -> Result<TrainConfig> {
    if let Some(v) = section.get("stage") {
        if v.as_str() != Some(kind.name()) {
            return Err(Error::Config(format!(
                "[{}] sets stage = {v}; the section name already fixes the stage",
                kind.name()
            )));
        }
    }
    let preset = TrainConfig {
        seed,
        ..TrainConfig::for_stage(kind)
    };
    let mut table = Table::try_from(&preset).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut table, section);
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[{}]: {}", kind.name(), e.message())))
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_toml("").expect("empty config is valid")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let cfg = Self {
            seed: raw.seed,
            output_dir: raw.output_dir,
            scene: raw.scene,
            data: raw.data,
            model: raw.model,
            xent: stage_config(StageKind::Xent, raw.seed, raw.xent)?,
            debias: stage_config(StageKind::Debias, raw.seed, raw.debias)?,
            reinforce: stage_config(StageKind::Reinforce, raw.seed, raw.reinforce)?,
            eval_decoding: raw.eval_decoding,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or uses defaults when `None`), then applies the
    /// output-directory environment override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })?
            }
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let dims = self.dims();
        dims.validate()?;
        for stage in [&self.xent, &self.debias, &self.reinforce] {
            stage.validate(dims.vocab_size, MAX_DECODE_LENGTH)?;
        }
        self.eval_decoding
            .validate()
            .map_err(|e| Error::Config(format!("eval-decoding: {e}")))?;
        if self.eval_decoding.max_length > MAX_DECODE_LENGTH {
            return Err(Error::Config(format!(
                "eval-decoding.max-length {} exceeds {MAX_DECODE_LENGTH}",
                self.eval_decoding.max_length
            )));
        }
        if self.data.probe_size == 0 {
            return Err(Error::Config("data.probe-size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            ..ModelDims::default()
        }
    }

    pub fn stage(&self, kind: StageKind) -> &TrainConfig {
        match kind {
            StageKind::Xent => &self.xent,
            StageKind::Debias => &self.debias,
            StageKind::Reinforce => &self.reinforce,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn split_path(&self, split: Split) -> PathBuf {
        self.data_dir().join(format!("{}.tsv", split.name()))
    }

    pub fn stage_dir(&self, kind: StageKind) -> PathBuf {
        self.output_dir.join(kind.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Probe,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Probe];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Probe => "probe",
        }
    }

    /// Sub-stream index for this split's scene seeds.
    pub fn stream_index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Probe => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train, val or probe)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_presets() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c.xent, TrainConfig::xent());
        assert_eq!(c.debias, TrainConfig::debias());
        assert_eq!(c.eval_decoding, DecodeConfig::default());
        assert_eq!(c.data, DataConfig::default());
    }

    #[test]
    fn sections_merge_over_presets() {
        let c = ExperimentConfig::from_toml(
            "seed = 9\n[debias]\nlearning-rate = 0.2\ndecode-config-train = { top-p = 0.5 }\n",
        )
        .unwrap();
        assert_eq!(c.debias.learning_rate, 0.2);
        assert_eq!(c.debias.seed, 9);
        assert_eq!(c.debias.decode_config_train.top_p, 0.5);
        assert_eq!(
            c.debias.decode_config_train.strategy,
            DecodeConfig::contrastive().strategy
        );
        assert_eq!(c.debias.max_steps, TrainConfig::debias().max_steps);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "bogus = 1",
            "[debias]\nlearning-rate = -1.0",
            "[debias]\nlerning-rate = 0.1",
            "[eval-decoding]\ntop-p = 0.0",
            "[xent]\nstage = \"debias\"",
            "[scene]\nmax-objects = 12",
            "[model]\nhidden-dim = 0",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
