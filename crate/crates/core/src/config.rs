//! Sectioned TOML configuration with per-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::cim::AttentionConfig;
use crate::error::{EdmError, Result};
use crate::fine::FineConfig;
use crate::supervision::LossConfig;
use crate::synth::DataConfig;

/// Environment variable that replaces `train.seed` when set.
pub const SEED_ENV: &str = "EDM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseConfig {
    /// Similarity temperature.
    pub tau: f64,
    /// Maximum number of coarse matches.
    pub k: usize,
    pub theta_c: f64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            tau: 0.1,
            k: 1024,
            theta_c: 5e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// First epoch at which the learning rate is halved.
    pub decay_start: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_pairs: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Fixed reduction order, single-threaded kernels.
    pub deterministic: bool,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            weight_decay: 0.01,
            warmup_epochs: 3,
            decay_start: 8,
            decay_every: 4,
            decay_factor: 0.5,
            epochs: 30,
            batch_size: 1,
            train_pairs: 64,
            seed: 7,
            image_size: 256,
            deterministic: true,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub eval_pairs: usize,
    /// Seeds of held-out pairs start here, disjoint from training seeds.
    pub eval_seed: u64,
    pub ransac_iters: usize,
    pub inlier_px: f64,
    pub auc_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_pairs: 16,
            eval_seed: 1_000_000,
            ransac_iters: 1000,
            inlier_px: 3.0,
            auc_thresholds: vec![3.0, 5.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| EdmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EdmError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let width = *self.backbone.channels.last().unwrap_or(&0);
        if self.backbone.channels.len() != 5 {
            return Err(EdmError::Config(format!(
                "backbone.channels needs 5 entries, got {:?}",
                self.backbone.channels
            )));
        }
        self.attention.validate(width)?;
        if self.train.image_size == 0 || !self.train.image_size.is_multiple_of(32) {
            return Err(EdmError::Config(format!(
                "train.image_size {} must be a positive multiple of 32",
                self.train.image_size
            )));
        }
        if self.coarse.tau <= 0.0 || self.coarse.k == 0 {
            return Err(EdmError::Config("coarse.tau must be positive and coarse.k at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(EdmError::Config("train.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// All override keys as `section.key`.
    pub fn keys(&self) -> Vec<String> {
        let v = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        if let toml::Value::Table(t) = v {
            for (section, inner) in t {
                if let toml::Value::Table(inner) = inner {
                    out.extend(inner.keys().map(|k| format!("{section}.{k}")));
                }
            }
        }
        out
    }

    /// Sets one key, given either as `section.key` or as a bare key that is
    /// unique across sections. The value is parsed as a TOML literal, falling
    /// back to a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let matches: Vec<String> = self
            .keys()
            .into_iter()
            .filter(|k| *k == key || k.rsplit('.').next() == Some(key.as_str()))
            .collect();
        let full = match matches.as_slice() {
            [one] => one.clone(),
            [] => return Err(EdmError::Config(format!("unknown config key {key:?}"))),
            _ => return Err(EdmError::Config(format!("ambiguous config key {key:?}: {matches:?}"))),
        };
        let (section, field) = full.split_once('.').expect("dotted key");
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        root[section][field] = parsed;
        let updated: Config = root
            .try_into()
            .map_err(|e: toml::de::Error| EdmError::Config(format!("{full} = {value}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Applies the seed environment variable when present.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| EdmError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}
