use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::error::{Error, Result};

/// Architecture sizes shared by the classifier and the explainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len_classifier: usize,
    pub max_len_explainer_in: usize,
    pub max_len_explainer_out: usize,
    pub annotator_embed_dim: usize,
    pub metadata_dim: usize,
    pub prefix_len: usize,
    pub bridge_hidden: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            max_len_classifier: 256,
            max_len_explainer_in: 512,
            max_len_explainer_out: 128,
            annotator_embed_dim: 64,
            metadata_dim: 32,
            prefix_len: 8,
            bridge_hidden: 256,
            init_std: 0.02,
            seed: 13,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len_classifier", self.max_len_classifier),
            ("max_len_explainer_in", self.max_len_explainer_in),
            ("max_len_explainer_out", self.max_len_explainer_out),
            ("annotator_embed_dim", self.annotator_embed_dim),
            ("metadata_dim", self.metadata_dim),
            ("bridge_hidden", self.bridge_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len_classifier < 3 || self.max_len_explainer_out < 2 {
            return Err(Error::Config("sequence limits too small".into()));
        }
        if self.init_std <= 0.0 {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Width of the fused representation `[h; u; m]`.
    pub fn fused_dim(&self) -> usize {
        self.d_model + self.annotator_embed_dim + self.metadata_dim
    }
}

/// Optimization settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplies `lr`; from-scratch desk-scale models usually need > 1.
    pub lr_multiplier: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total optimizer steps spent warming up.
    pub warmup_ratio: f64,
    pub clip_max_norm: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub lambda_soft: f64,
    pub focal_gamma: f64,
    /// Per-class positive weights (C, E, N); computed from train data if absent.
    pub class_weights: Option<[f64; 3]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::classifier()
    }
}

impl TrainConfig {
    pub fn classifier() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            lr: 2e-5,
            lr_multiplier: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_ratio: 0.06,
            clip_max_norm: 1.0,
            patience: 3,
            batch_size: 32,
            lambda_soft: 1.0,
            focal_gamma: 2.0,
            class_weights: None,
        }
    }

    pub fn explainer() -> TrainConfig {
        TrainConfig {
            lr: 8e-5,
            ..TrainConfig::classifier()
        }
    }

    pub fn peak_lr(&self) -> f64 {
        self.lr * self.lr_multiplier
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr() > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.lambda_soft < 0.0 {
            return Err(Error::Config("lambda_soft must be non-negative".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_gamma must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        TrainConfig::classifier().validate().unwrap();
        assert_eq!(TrainConfig::explainer().lr, 8e-5);
    }

    #[test]
    fn rejects_bad_heads_and_patience() {
        let m = ModelConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(m.validate().is_err());
        let t = TrainConfig {
            patience: 0,
            ..TrainConfig::classifier()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ModelConfig>("d_model = 32\nwidth = 3").is_err());
        let m: ModelConfig = toml::from_str("d_model = 32").unwrap();
        assert_eq!(m.n_layers, 2);
    }
}
