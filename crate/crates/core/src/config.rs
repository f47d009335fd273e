//! Run configuration: one TOML document holding the generator spec, model
//! sizes, training budgets, strategy and seed. Every field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connector::ConnectorKind;
use crate::error::{Error, Result};
use crate::speech_lm::ModelConfig;
use crate::synthdata::SynthSpec;
use crate::tokenizer::{train_bpe, Vocab};
use crate::training::{Strategy, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Preset letter or four-digit flag string.
    pub strategy: String,
    /// BPE vocabulary size including bytes and special tokens.
    pub vocab_size: usize,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            instruction: "transcribe:".into(),
            ..ModelConfig::default()
        };
        let mut train = TrainConfig::default();
        train.pretrain.steps = 4000;
        train.pretrain.optimizer.lr = 2e-3;
        train.pretrain.optimizer.batch_size = 16;
        train.stage1.steps = 2000;
        train.stage1.optimizer.lr = 3e-3;
        train.stage2.steps = 8000;
        train.stage2.optimizer.lr = 1e-3;
        for p in [&mut train.pretrain, &mut train.stage1, &mut train.stage2] {
            p.optimizer.warmup_steps = 50;
        }
        train.prefix_frames = (4, 7);
        train.prefix_window = 5;
        train.pretrain_texts = 60_000;
        Self {
            seed: 1,
            strategy: "F".into(),
            vocab_size: 600,
            synth: SynthSpec::default(),
            model,
            train,
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Parses a possibly partial document. Missing keys take their values
    /// from [`RunConfig::default`], at any nesting depth.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| cfg_err(&e))?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy()?;
        self.synth.validate()?;
        self.train.pretrain.optimizer.validate()?;
        self.train.stage1.optimizer.validate()?;
        self.train.stage2.optimizer.validate()?;
        if self.model.connector.d_feat != self.synth.d_feat {
            return Err(Error::Config(format!(
                "connector d_feat {} differs from generator d_feat {}",
                self.model.connector.d_feat, self.synth.d_feat
            )));
        }
        Ok(())
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy.parse()
    }

    pub fn connector_kind(&self) -> ConnectorKind {
        self.model.connector.kind
    }

    /// Model configuration sized for `vocab`.
    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        let mut m = self.model.clone();
        m.lm.vocab_size = vocab.len();
        m
    }

    /// BPE vocabulary trained on training transcripts.
    pub fn train_vocab<'a, I: IntoIterator<Item = &'a str>>(&self, texts: I) -> Result<Vocab> {
        train_bpe(texts, self.vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let s = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&s).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("seed = 9\n[train.stage1]\nsteps = 5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.stage1.steps, 5);
        let d = RunConfig::default();
        assert_eq!(c.train.stage2.steps, d.train.stage2.steps);
        assert_eq!(c.train.stage1.optimizer, d.train.stage1.optimizer);
        assert_eq!(c.train.prefix_frames, d.train.prefix_frames);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("strategy = \"Z\""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    }
}
