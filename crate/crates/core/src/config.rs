//! Experiment configuration.
//!
//! A config file is TOML with up to four tables, `[generator]`,
//! `[discriminator]`, `[train]` and `[data]`. Any key may be omitted: the file
//! is laid over a base preset (full-size by default, tiny with `--toy`), so a
//! file only needs the keys it changes. Unknown keys are rejected.
//!
//! ```toml
//! [train]
//! lr = 1e-3
//! max_epochs = 40
//!
//! [generator]
//! d_model = 16
//! n_heads = 2
//! d_k = 8
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::DEFAULT_LR;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(Error::invalid(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Generator learning rate during pre-training.
    pub lr: f64,
    /// Fine-tuning generator learning rate is `lr * finetune_lr_scale`.
    pub finetune_lr_scale: f64,
    /// Discriminator learning rate.
    pub d_lr: f64,
    /// Utterances per optimizer step.
    pub batch_size: usize,
    /// Pre-training epoch limit.
    pub max_epochs: usize,
    /// Epochs without validation improvement before pre-training stops.
    pub patience: usize,
    pub finetune_epochs: usize,
    /// Target score `s` in the generator loss.
    pub target_score: f64,
    /// Discriminator steps per generator step.
    pub d_steps: usize,
    /// Discriminator steps on the frozen pre-trained generator before the first generator step.
    pub d_warmup_steps: usize,
    /// Gradient-norm clip on the generator during fine-tuning; 0 disables it.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain,
            lr: DEFAULT_LR,
            finetune_lr_scale: 0.1,
            d_lr: 1e-3,
            batch_size: 1,
            max_epochs: 100,
            patience: 5,
            finetune_epochs: 20,
            target_score: 1.0,
            d_steps: 2,
            d_warmup_steps: 200,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn finetune_lr(&self) -> f64 {
        self.lr * self.finetune_lr_scale
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) || !positive(self.d_lr) || !positive(self.finetune_lr_scale) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.target_score) {
            return bad("target_score must lie in [0, 1]");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.d_steps == 0 {
            return bad("batch_size and d_steps must be at least 1");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be nonnegative");
        }
        Ok(())
    }
}

/// Synthetic dataset recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub pairs: usize,
    pub duration_s: f64,
    pub snr_grid: Vec<f64>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: 36,
            duration_s: 0.5,
            snr_grid: vec![0.0, 5.0, 10.0],
            train_fraction: 0.75,
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs < 2 {
            return Err(Error::Config("need at least 2 pairs".into()));
        }
        if self.snr_grid.is_empty() || self.snr_grid.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("snr_grid must be nonempty and finite".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Config("duration_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Full-size models with the reference learning rate.
    pub fn full_size() -> Self {
        Self {
            generator: GeneratorConfig::full_size(),
            discriminator: DiscriminatorConfig::full_size(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// Tiny models on the synthetic set. Pre-training uses a raised learning
    /// rate so it converges in a few dozen epochs; fine-tuning steps at
    /// about 1e-5, the same order as the reference rate over ten.
    pub fn toy() -> Self {
        Self {
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
            train: TrainConfig {
                lr: 3e-3,
                finetune_lr_scale: 0.003,
                max_epochs: 60,
                patience: 4,
                finetune_epochs: 10,
                d_warmup_steps: 150,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }

    pub fn preset(toy: bool) -> Self {
        if toy {
            Self::toy()
        } else {
            Self::full_size()
        }
    }

    /// Lays the keys of a TOML document over `base`.
    pub fn overlay(base: &Self, text: &str) -> Result<Self> {
        let patch: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, patch);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, base: &Self) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::overlay(base, &text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        self.data.validate()
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
