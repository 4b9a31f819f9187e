//! `key = value` run configuration with command-line overrides.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use thinvlad::losses::{AmSoftmaxConfig, LossKind};
use thinvlad::model::{HeadConfig, HeadKind, ModelConfig, TrunkConfig};
use thinvlad::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub trunk: TrunkConfig,
    pub head: HeadConfig,
    pub embed_dim: usize,
    pub softmax: bool,
    pub margin: f64,
    pub scale: f64,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            trunk: TrunkConfig::default(),
            head: HeadConfig::default(),
            embed_dim: 512,
            softmax: false,
            margin: AmSoftmaxConfig::DEFAULT_MARGIN,
            scale: AmSoftmaxConfig::DEFAULT_SCALE,
        }
    }
}

pub const KEYS: &[&str] = &[
    "learning_rate",
    "decay_factor",
    "decay_interval",
    "batch_size",
    "crop_seconds",
    "epochs",
    "patience",
    "checkpoint_every",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "width_multiplier",
    "head",
    "clusters",
    "ghost_clusters",
    "intra_normalize",
    "embed_dim",
    "loss",
    "margin",
    "scale",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("bad value '{value}' for {key}"))
}

impl CliConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "learning_rate" => t.learning_rate = num(key, value)?,
            "decay_factor" => t.decay_factor = num(key, value)?,
            "decay_interval" => t.decay_interval = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "crop_seconds" => t.crop_seconds = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "adam_beta1" => t.adam.beta1 = num(key, value)?,
            "adam_beta2" => t.adam.beta2 = num(key, value)?,
            "adam_eps" => t.adam.eps = num(key, value)?,
            "width_multiplier" => self.trunk.width_multiplier = num(key, value)?,
            "head" => self.head.kind = value.parse::<HeadKind>().map_err(|e| anyhow!(e))?,
            "clusters" => self.head.clusters = num(key, value)?,
            "ghost_clusters" => self.head.ghost_clusters = num(key, value)?,
            "intra_normalize" => self.head.intra_normalize = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "loss" => {
                self.softmax = match value {
                    "softmax" => true,
                    "amsoftmax" => false,
                    _ => bail!("unknown loss '{value}' (softmax|amsoftmax)"),
                }
            }
            "margin" => self.margin = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "learning_rate" => t.learning_rate.to_string(),
            "decay_factor" => t.decay_factor.to_string(),
            "decay_interval" => t.decay_interval.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "crop_seconds" => t.crop_seconds.to_string(),
            "epochs" => t.epochs.to_string(),
            "patience" => t.patience.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "seed" => t.seed.to_string(),
            "adam_beta1" => t.adam.beta1.to_string(),
            "adam_beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "width_multiplier" => self.trunk.width_multiplier.to_string(),
            "head" => match self.head.kind {
                HeadKind::Tap => "tap",
                HeadKind::NetVlad => "netvlad",
                HeadKind::GhostVlad => "ghostvlad",
            }
            .to_string(),
            "clusters" => self.head.clusters.to_string(),
            "ghost_clusters" => self.head.ghost_clusters.to_string(),
            "intra_normalize" => self.head.intra_normalize.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "loss" => if self.softmax { "softmax" } else { "amsoftmax" }.to_string(),
            "margin" => self.margin.to_string(),
            "scale" => self.scale.to_string(),
            _ => unreachable!("key list and accessors agree"),
        }
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override '{o}' is not key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }

    /// Checks the training and model settings without any data at hand.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config(2).map(|_| ())
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let loss = if self.softmax {
            LossKind::Softmax
        } else {
            LossKind::AmSoftmax {
                margin: self.margin,
                scale: self.scale,
            }
        };
        let cfg = ModelConfig {
            trunk: self.trunk.clone(),
            head: self.head.clone(),
            embed_dim: self.embed_dim,
            num_classes,
            loss,
        };
        cfg.validate().map_err(|e| anyhow!(e))?;
        Ok(cfg)
    }
}
