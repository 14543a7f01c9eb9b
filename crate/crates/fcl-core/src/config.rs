//! Run configuration: structured UTF-8 text (TOML) with explicit keys.
//! Unknown keys are rejected, every field has a default, and the canonical
//! serialization is hashed into all outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focal exponent.
    pub gamma: f64,
    /// Dice smoothing term.
    pub epsilon: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Anchor-loss weight in the total objective.
    pub lambda1: f64,
    /// Contrastive weight.
    pub lambda2: f64,
    /// Focal weight.
    pub lambda3: f64,
    /// Student dice weight inside the anchor loss.
    pub lambda_stu_dice: f64,
    /// Teacher dice weight inside the anchor loss.
    pub lambda_tea_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            epsilon: 1e-6,
            tau: 0.07,
            lambda1: 0.50,
            lambda2: 1.00,
            lambda3: 20.0,
            lambda_stu_dice: 0.5,
            lambda_tea_dice: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// EMA momentum per step.
    pub momentum: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { momentum: 0.99 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 60,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Low-rank adapter rank.
    pub rank: usize,
    /// Stage-2 channel count.
    pub channels: usize,
    /// Tri-channel attention reduction ratio.
    pub reduction: usize,
    /// Stage-1 patch size.
    pub patch_size: usize,
    /// Stage-1 token embedding width.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            rank: 4,
            channels: 16,
            reduction: 4,
            patch_size: 4,
            embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    pub size: usize,
    pub difficulty: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 250,
            size: 64,
            difficulty: 0.25,
            test_fraction: 0.2,
            val_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Checkpoint cadence in epochs (a final checkpoint is always written).
    pub checkpoint_every: usize,
    /// Stage-2 epoch count (stage 1 uses `optimizer.epochs`).
    pub stage2_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { checkpoint_every: 5, stage2_epochs: 60 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub teacher: TeacherConfig,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CoreError::Config(msg.to_string()));
        if self.loss.gamma < 0.0 {
            return bad("loss.gamma must be >= 0");
        }
        if self.loss.epsilon < 0.0 {
            return bad("loss.epsilon must be >= 0");
        }
        if self.loss.tau <= 0.0 {
            return bad("loss.tau must be > 0");
        }
        if [self.loss.lambda1, self.loss.lambda2, self.loss.lambda3]
            .iter()
            .any(|l| *l < 0.0)
        {
            return bad("loss weights must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.teacher.momentum) {
            return bad("teacher.momentum must lie in [0, 1]");
        }
        if self.optimizer.lr <= 0.0 {
            return bad("optimizer.lr must be > 0");
        }
        if self.optimizer.batch_size == 0 || self.optimizer.epochs == 0 {
            return bad("optimizer.epochs and batch_size must be >= 1");
        }
        if self.model.rank == 0 || self.model.rank > self.model.embed_dim / 2 {
            return bad("model.rank must satisfy 1 <= rank <= embed_dim / 2");
        }
        if self.model.channels == 0 || self.model.reduction == 0 {
            return bad("model.channels and model.reduction must be >= 1");
        }
        if self.model.channels % self.model.reduction != 0 {
            return bad("model.reduction must divide model.channels");
        }
        if self.model.patch_size == 0 || self.dataset.size % self.model.patch_size != 0 {
            return bad("model.patch_size must divide dataset.size");
        }
        if !(32..=128).contains(&self.dataset.size) {
            return bad("dataset.size must lie in [32, 128]");
        }
        if !(0.0..=1.0).contains(&self.dataset.difficulty) {
            return bad("dataset.difficulty must lie in [0, 1]");
        }
        if self.dataset.test_fraction + self.dataset.val_fraction >= 1.0
            || self.dataset.test_fraction < 0.0
            || self.dataset.val_fraction < 0.0
        {
            return bad("dataset split fractions must be >= 0 and sum below 1");
        }
        if self.dataset.count == 0 {
            return bad("dataset.count must be >= 1");
        }
        if self.train.stage2_epochs == 0 {
            return bad("train.stage2_epochs must be >= 1");
        }
        Ok(())
    }

    /// Canonical serialization used for hashing and for writing back out.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_toml().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        out
    }

    pub fn hash_hex(&self) -> String {
        hex_of(&self.hash())
    }
}

pub fn hex_of(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_design_values() {
        let c = RunConfig::default();
        assert_eq!(c.loss.lambda1, 0.50);
        assert_eq!(c.loss.lambda2, 1.00);
        assert_eq!(c.loss.lambda3, 20.0);
        assert_eq!(c.loss.gamma, 2.0);
        assert_eq!(c.loss.tau, 0.07);
        assert_eq!(c.teacher.momentum, 0.99);
        assert_eq!(c.optimizer.momentum, 0.9);
        assert_eq!(c.optimizer.weight_decay, 5e-4);
        assert_eq!(c.model.rank, 4);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[loss]\ngamma = 2.0\nmystery = 1.0\n";
        assert!(RunConfig::from_toml_str(text).is_err());
        let text2 = "[not_a_section]\nx = 1\n";
        assert!(RunConfig::from_toml_str(text2).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let text = "[loss]\ntau = 0.0\n";
        assert!(RunConfig::from_toml_str(text).is_err());
        let text = "[dataset]\nsize = 20\n";
        assert!(RunConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.loss.lambda2 = 0.0;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml_str("[optimizer]\nepochs = 3\n").unwrap();
        assert_eq!(c.optimizer.epochs, 3);
        assert_eq!(c.optimizer.lr, 1e-3);
        assert_eq!(c.loss.lambda3, 20.0);
    }
}
