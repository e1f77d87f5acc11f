//! Run configuration: every hyperparameter of a pretrain, fine-tune and
//! evaluation run in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::LossWeights;
use crate::encoders::EncoderConfig;
use crate::error::{invalid, Result};
use crate::masking::MaskSemantics;
use crate::model::SharingMode;
use crate::optim::AdamConfig;
use crate::train::{Augmentation, TrainConfig, Unified};
use crate::vqa::FinetuneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Transformer blocks per encoder, `K`.
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub q_max: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub tau: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Masking-model learning rate; `lr` when absent.
    pub masking_lr: Option<f64>,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub mask_semantics: MaskSemantics,
    pub augmentation: Augmentation,
    pub sharing: SharingMode,
    pub unified: Unified,
    /// Masking updates per encoder update.
    pub masking_steps: u32,
    /// Scenes written by gen-data, starting at scene seed 0.
    pub n_samples: usize,
    pub finetune_steps: u64,
    /// Fine-tune learning rate; `lr` when absent.
    pub finetune_lr: Option<f64>,
    pub finetune_batch: usize,
    pub freeze_encoders: bool,
    /// Samples exported by export-masks.
    pub export_samples: usize,
    /// Record per-step wall time in the metrics; off keeps metrics reproducible.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 32,
            heads: 4,
            proj_dim: 16,
            patch_size: 4,
            vocab_size: 64,
            q_max: 12,
            n_v: 4,
            n_t: 2,
            tau: 0.1,
            beta: 0.3,
            lambda: 1e-3,
            lr: 1e-3,
            masking_lr: None,
            weight_decay: 5e-4,
            batch: 16,
            steps: 2000,
            seed: 1,
            mask_semantics: MaskSemantics::Occlude,
            augmentation: Augmentation::Adversarial,
            sharing: SharingMode::Gradual,
            unified: Unified::Joint,
            masking_steps: 1,
            n_samples: 1000,
            finetune_steps: 1500,
            finetune_lr: None,
            finetune_batch: 16,
            freeze_encoders: false,
            export_samples: 8,
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.n_v == 0 || self.n_t == 0 {
            return Err(invalid("mask counts n_v and n_t must be at least 1"));
        }
        if self.batch < 2 {
            return Err(invalid("pretraining batch must hold at least 2 pairs"));
        }
        if self.finetune_batch == 0 {
            return Err(invalid("finetune_batch must be positive"));
        }
        if self.masking_steps == 0 {
            return Err(invalid("masking_steps must be at least 1"));
        }
        for (name, lr) in [
            ("lr", Some(self.lr)),
            ("masking_lr", self.masking_lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if let Some(v) = lr {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(invalid(format!("{name} must be non-negative, got {v}")));
                }
            }
        }
        self.encoder().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            patch_size: self.patch_size,
            vocab_size: self.vocab_size,
            q_max: self.q_max,
            proj_dim: self.proj_dim,
            image_size: crate::data::IMAGE_SIZE,
            positional: true,
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights {
                tau: self.tau,
                beta: self.beta,
                lambda: self.lambda,
                semantics: self.mask_semantics,
            },
            encoder_adam: self.adam(self.lr),
            masking_adam: self.adam(self.masking_lr.unwrap_or(self.lr)),
            augmentation: self.augmentation,
            sharing: self.sharing,
            unified: self.unified,
            total_steps: self.steps,
            masking_steps: self.masking_steps,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            adam: self.adam(self.finetune_lr.unwrap_or(self.lr)),
            freeze_encoders: self.freeze_encoders,
            batch: self.finetune_batch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn desk_scale_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.layers, c.hidden, c.heads, c.proj_dim), (4, 32, 4, 16));
        assert_eq!((c.n_v, c.n_t, c.batch, c.steps), (4, 2, 16, 2000));
        assert_eq!(
            (c.tau, c.beta, c.lambda, c.lr, c.weight_decay),
            (0.1, 0.3, 1e-3, 1e-3, 5e-4)
        );
        let t = c.train();
        assert_eq!(t.masking_adam, t.encoder_adam);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"lamda": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn enum_axes_parse_lowercase() {
        let c = RunConfig::from_json(
            r#"{"augmentation": "random", "sharing": "none", "unified": "sequential", "mask_semantics": "keep"}"#,
        )
        .unwrap();
        assert_eq!(c.augmentation, Augmentation::Random);
        assert_eq!(c.sharing, SharingMode::None);
        assert_eq!(c.unified, Unified::Sequential);
        assert_eq!(c.mask_semantics, MaskSemantics::Keep);
    }

    #[test]
    fn invariants_enforced() {
        for bad in [
            r#"{"beta": 1.5}"#,
            r#"{"beta": -0.1}"#,
            r#"{"lambda": -1e-3}"#,
            r#"{"tau": 0}"#,
            r#"{"n_v": 0}"#,
            r#"{"n_t": 0}"#,
            r#"{"batch": 1}"#,
            r#"{"hidden": 30}"#,
            r#"{"masking_steps": 0}"#,
        ] {
            assert!(RunConfig::from_json(bad).is_err(), "{bad}");
        }
        assert!(RunConfig::from_json(r#"{"beta": 0, "lambda": 0}"#).is_ok());
    }
}
