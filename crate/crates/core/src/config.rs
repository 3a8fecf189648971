use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::Smoothing;

/// Network sizes shared by the encoder and the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Longest encoder input, `[CLS]` included.
    pub max_len: usize,
    /// Longest response, `[EOS]` included. The position table has
    /// `max_len + max_target_len` rows.
    pub max_target_len: usize,
    pub dropout: f64,
    /// Mix prior rows by the speaker distribution instead of selecting the
    /// argmax row.
    pub soft_prior_lookup: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 2,
            heads: 4,
            d_ff: 512,
            max_len: 256,
            max_target_len: 64,
            dropout: 0.1,
            soft_prior_lookup: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("model sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.max_len < 2 || self.max_target_len < 1 {
            return bad("max_len must be at least 2 and max_target_len at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.max_len + self.max_target_len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub p_gold_start: f64,
    pub p_gold_end: f64,
    /// Alternate EmoDM/RespG every batch instead of every epoch.
    pub per_batch_alternation: bool,
    pub top_k: usize,
    pub temperature: f64,
    pub max_new: usize,
    pub seed: u64,
    pub min_freq: usize,
    pub smoothing: Smoothing,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.5,
            lr: 2e-4,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 20,
            warmup_epochs: 2,
            p_gold_start: 1.0,
            p_gold_end: 0.1,
            per_batch_alternation: false,
            top_k: 5,
            temperature: 1.0,
            max_new: 32,
            seed: 0,
            min_freq: 1,
            smoothing: Smoothing::None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return bad(format!("beta {} must be non-negative", self.beta));
        }
        for (name, p) in [("p_gold_start", self.p_gold_start), ("p_gold_end", self.p_gold_end)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return bad("lr, batch_size and epochs must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if self.top_k == 0 || self.max_new == 0 || !(self.temperature > 0.0) {
            return bad("top_k, max_new and temperature must be positive".into());
        }
        if self.min_freq == 0 {
            return bad("min_freq must be at least 1".into());
        }
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
