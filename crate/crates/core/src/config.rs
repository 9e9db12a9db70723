//! Run configuration. Every section has complete defaults and rejects
//! unknown keys, so a typo in a JSON config is an error rather than a silently
//! ignored weight.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub subjects: usize,
    /// Length of the temporal axis after adaptive pooling.
    pub pooled_len: usize,
    /// Width of the task and subject embeddings.
    pub feature_dim: usize,
    pub spatial_hidden: usize,
    pub temporal_width: usize,
    pub temporal_kernel: usize,
    pub dropout: f64,
    /// Learn the fusion weights through a sigmoid; otherwise both stay 0.5.
    pub fusion_learnable: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            samples: 128,
            classes: 2,
            subjects: 6,
            pooled_len: 16,
            feature_dim: 64,
            spatial_hidden: 64,
            temporal_width: 16,
            temporal_kernel: 7,
            dropout: 0.5,
            fusion_learnable: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub disable_stap: bool,
    pub disable_personal_branch: bool,
    pub disable_common_branch: bool,
    pub disable_orth: bool,
    pub disable_cov: bool,
    pub disable_info: bool,
    pub disable_sparse_feat: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 30,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub eta: f64,
    pub steps: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self { eta: 1e-3, steps: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtsmConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub adaptation: AdaptationConfig,
    pub seed: u64,
}

impl Default for PtsmConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            ablation: Ablation::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            adaptation: AdaptationConfig::default(),
            seed: 0,
        }
    }
}

impl PtsmConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.channels", m.channels),
            ("model.samples", m.samples),
            ("model.classes", m.classes),
            ("model.subjects", m.subjects),
            ("model.pooled_len", m.pooled_len),
            ("model.feature_dim", m.feature_dim),
            ("model.spatial_hidden", m.spatial_hidden),
            ("model.temporal_width", m.temporal_width),
            ("model.temporal_kernel", m.temporal_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if m.temporal_kernel % 2 == 0 {
            return Err(Error::Config("model.temporal_kernel must be odd".into()));
        }
        if m.pooled_len > m.samples {
            return Err(Error::Config(format!(
                "model.pooled_len {} exceeds model.samples {}",
                m.pooled_len, m.samples
            )));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        if !(m.bn_eps > 0.0) || !(0.0..=1.0).contains(&m.bn_momentum) {
            return Err(Error::Config("model.bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
            || !(o.weight_decay >= 0.0)
        {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if self.training.batch_size < 2 {
            return Err(Error::Config(
                "training.batch_size must be at least 2 (batch statistics)".into(),
            ));
        }
        if !(self.adaptation.eta >= 0.0) {
            return Err(Error::Config("adaptation.eta must be >= 0".into()));
        }
        Ok(())
    }
}
