//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::init::{PoolerInit, PromptInit};
use crate::model::{ModelConfig, ModelVariant};
use crate::pipeline::Experiment;
use crate::trainer::TrainConfig;

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("encoder.num_layers", "2"),
    ("encoder.hidden_dim", "64"),
    ("encoder.num_heads", "4"),
    ("encoder.ffn_dim", "256"),
    ("encoder.max_positions", "160"),
    ("encoder.dropout_rate", "0.1"),
    ("vocab.max_size", "10000"),
    ("data.dir", ""),
    ("data.tasks", ""),
    ("data.max_len", "128"),
    ("model.variant", "mtop"),
    ("model.prompt_len", "2"),
    ("model.shared_prompts", "0"),
    ("train.batch_size", "16"),
    ("train.epochs", "20"),
    ("train.peak_lr", "1e-5"),
    ("train.warmup_fraction", "0.1"),
    ("train.eval_batch_size", "64"),
    ("init.prompt", "rd"),
    ("init.pooler", "rd"),
    ("init.artifacts", ""),
    ("output.dir", "out"),
    ("output.run_name", "run"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(k, _)| *k)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| Error::Config(format!("{key} = '{}': {e}", self.get(key))))
    }

    /// Checks every typed key parses and the configs validate.
    pub fn validate(&self) -> Result<()> {
        self.parse::<u64>("seed")?;
        self.parse::<usize>("vocab.max_size")?;
        self.parse::<usize>("data.max_len")?;
        let exp = self.experiment()?;
        exp.train.validate()?;
        let mut enc = exp.model.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(crate::data::SPECIALS.len());
        enc.validate()
    }

    pub fn seed(&self) -> u64 {
        self.parse("seed").unwrap_or(0)
    }

    pub fn tasks(&self) -> Vec<String> {
        self.get("data.tasks")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        Some(self.get("data.dir"))
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
    }

    pub fn artifacts_dir(&self) -> Option<PathBuf> {
        Some(self.get("init.artifacts"))
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
    }

    pub fn run_dir(&self) -> PathBuf {
        Path::new(self.get("output.dir")).join(self.get("output.run_name"))
    }

    /// Encoder, model, training and init settings; the vocabulary size is
    /// filled in once the vocabulary exists.
    pub fn experiment(&self) -> Result<Experiment> {
        let encoder = EncoderConfig {
            num_layers: self.parse("encoder.num_layers")?,
            hidden_dim: self.parse("encoder.hidden_dim")?,
            num_heads: self.parse("encoder.num_heads")?,
            ffn_dim: self.parse("encoder.ffn_dim")?,
            max_positions: self.parse("encoder.max_positions")?,
            vocab_size: 0,
            dropout_rate: self.parse("encoder.dropout_rate")?,
        };
        Ok(Experiment {
            model: ModelConfig {
                encoder,
                prompt_len: self.parse("model.prompt_len")?,
                shared_prompts: self.parse("model.shared_prompts")?,
                variant: self.parse::<ModelVariant>("model.variant")?,
            },
            train: TrainConfig {
                batch_size: self.parse("train.batch_size")?,
                epochs: self.parse("train.epochs")?,
                peak_lr: self.parse("train.peak_lr")?,
                warmup_fraction: self.parse("train.warmup_fraction")?,
                seed: 0,
                eval_batch_size: self.parse("train.eval_batch_size")?,
            },
            prompt_init: self.parse::<PromptInit>("init.prompt")?,
            pooler_init: self.parse::<PoolerInit>("init.pooler")?,
        })
    }

    /// Every key, defaults included, one `key = value` per line in key order.
    pub fn resolved(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let err = "train.lr = 3".parse::<RunConfig>().unwrap_err();
        assert!(err.to_string().contains("unknown key 'train.lr'"));
    }

    #[test]
    fn resolved_round_trips() {
        let cfg: RunConfig = "# comment\nmodel.variant = per_task_prompt\n\ntrain.epochs=3"
            .parse()
            .unwrap();
        assert_eq!(cfg.get("model.variant"), "per_task_prompt");
        let again: RunConfig = cfg.resolved().parse().unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.resolved().lines().count(), DEFAULTS.len());
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = "train.epochs = many".parse::<RunConfig>().unwrap_err();
        assert!(err.to_string().contains("train.epochs"));
        assert!("model.variant = bert".parse::<RunConfig>().is_err());
        assert!("train.warmup_fraction = 1.5".parse::<RunConfig>().is_err());
    }

    #[test]
    fn defaults_follow_the_training_recipe() {
        let exp = RunConfig::default().experiment().unwrap();
        assert_eq!(exp.train.batch_size, 16);
        assert_eq!(exp.train.peak_lr, 1e-5);
        assert_eq!(exp.model.prompt_len, 2);
        assert_eq!(exp.model.shared_prompts, 0);
    }
}
