//! Run configuration: one TOML document with `[model]`, `[flow]`,
//! `[noise]`, `[train]` and `[cipher]` tables. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CipherSpec;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;

/// How output logits are restricted per target language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    /// Each decoder scores only eos, unk and its own language's tokens.
    PerLanguage,
    /// Every decoder scores the whole joint vocabulary.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Longest token sequence, bos and eos included.
    pub max_len: usize,
    pub d_z: usize,
    pub shared_decoder: bool,
    pub vocab_mode: VocabMode,
    /// Attach the per-language flows. Without them the untransformed source
    /// latent is fed to the decoder and no likelihood term is trained.
    pub adapter: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ff: 512,
            dropout: 0.2,
            max_len: 64,
            d_z: 100,
            shared_decoder: false,
            vocab_mode: VocabMode::PerLanguage,
            adapter: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_layers and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model dropout must lie in [0, 1)".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must leave room for bos, a token and eos".into()));
        }
        if self.d_z == 0 || self.d_z % 2 != 0 {
            return Err(Error::Config(format!("d_z must be even and positive, got {}", self.d_z)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Word-drop probability.
    pub p_wd: f64,
    /// Maximum shuffle displacement.
    pub k: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { p_wd: 0.1, k: 3 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_wd) {
            return Err(Error::Config(format!("p_wd must lie in [0, 1], got {}", self.p_wd)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_mle: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of denoising only before back-translation starts.
    pub warmup_epochs: usize,
    /// Overrides `warmup_epochs` with an optimizer-step count when set.
    pub warmup_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub bt_enabled: bool,
    /// Detach the latent before the likelihood term so it trains the flows only.
    pub mle_stop_grad: bool,
    /// Validation sentences scored per direction after each epoch (0 = all).
    pub valid_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_mle: 0.01,
            lr: 1e-4,
            batch_size: 32,
            epochs: 10,
            warmup_epochs: 3,
            warmup_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 1,
            bt_enabled: true,
            mle_stop_grad: false,
            valid_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mle >= 0.0) {
            return Err(Error::Config("lambda_mle must be non-negative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.warmup_steps.is_none() && self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam moments must lie in [0, 1) with positive eps".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub cipher: CipherSpec,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.adapter {
            self.flow.validate(self.model.d_z)?;
        }
        self.noise.validate()?;
        self.train.validate()?;
        self.cipher.validate()?;
        Ok(())
    }
}
