//! Training state and the alternating min-max step: encoders descend on
//! the combined objective, then the mask generators ascend on the summed
//! CLAM terms of the same batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Trainable};
use crate::contrastive::{uniclam_loss, uniclam_loss_on, FixedMasks, LossBreakdown, LossWeights, PairBatch};
use crate::encoders::EncoderConfig;
use crate::error::{invalid, Error, Phase, Result};
use crate::masking::random_masks;
use crate::model::{Model, SharingMode};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::params::ParamStore;

/// Source of the masked views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    /// Masks from the generators, trained adversarially.
    #[default]
    Adversarial,
    /// Fresh one-hot random masks every step; the generators stay idle.
    Random,
}

/// Whether both modalities train together or one after the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unified {
    #[default]
    Joint,
    /// Vision-only objective for the first half of the run, text-only for
    /// the second half.
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub encoder_adam: AdamConfig,
    pub masking_adam: AdamConfig,
    pub augmentation: Augmentation,
    pub sharing: SharingMode,
    pub unified: Unified,
    /// Planned run length; sets the switch point of the sequential schedule.
    pub total_steps: u64,
    /// Masking updates per encoder update.
    pub masking_steps: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            encoder_adam: AdamConfig::default(),
            masking_adam: AdamConfig::default(),
            augmentation: Augmentation::Adversarial,
            sharing: SharingMode::Gradual,
            unified: Unified::Joint,
            total_steps: 2000,
            masking_steps: 1,
        }
    }
}

/// Everything that evolves during pretraining.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub store: ParamStore,
    pub model: Model,
    pub encoder_opt: OptimizerState,
    pub masking_opt: OptimizerState,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
}

/// Measurements of one alternating step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Objective of the encoder phase, before its update.
    pub loss: LossBreakdown,
    /// Encoder-phase objective on the same batch after the encoder update.
    pub encoder_post: f64,
    /// `l_clam_v + l_clam_t` before the masking update.
    pub masking_pre: f64,
    /// `l_clam_v + l_clam_t` after the masking update.
    pub masking_post: f64,
    pub entropy_v: f64,
    pub entropy_t: f64,
}

impl TrainState {
    pub fn new(encoder: &EncoderConfig, n_v: usize, n_t: usize, config: TrainConfig, seed: u64) -> Result<Self> {
        if config.masking_steps == 0 {
            return Err(invalid("masking_steps must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Model::new(encoder, n_v, n_t, config.sharing, &mut store, &mut rng)?;
        let encoder_opt = OptimizerState::new(config.encoder_adam, &store, &model.encoder_ids());
        let masking_opt = OptimizerState::new(config.masking_adam, &store, &model.masking_ids());
        Ok(Self {
            store,
            model,
            encoder_opt,
            masking_opt,
            step: 0,
            rng,
            config,
        })
    }

    /// Loss weights in effect at the current step.
    pub fn weights(&self) -> LossWeights {
        let mut w = self.config.weights;
        if self.config.sharing != SharingMode::Gradual {
            w.lambda = 0.0;
        }
        if self.config.unified == Unified::Sequential {
            w.beta = if self.step < self.config.total_steps.div_ceil(2) {
                1.0
            } else {
                0.0
            };
        }
        w
    }

    fn draw_masks(&mut self, batch: &PairBatch) -> FixedMasks {
        let s = batch.images.shape();
        let (n, nv, nt) = (s[0], self.model.masks.vision.n_masks, self.model.masks.text.n_masks);
        let per: Vec<_> = (0..n).map(|_| random_masks(&mut self.rng, nv, &s[1..])).collect();
        let mut data = Vec::with_capacity(n * nv * s[1] * s[2]);
        for m in &per {
            data.extend_from_slice(m.data());
        }
        let vision = crate::tensor::Tensor::new(vec![n, nv, s[1], s[2]], data).expect("mask layout");
        let text = batch
            .texts
            .iter()
            .map(|t| random_masks(&mut self.rng, nt, &[t.len()]))
            .collect();
        FixedMasks { vision, text }
    }

    /// One encoder update followed by the masking update(s) on `batch`.
    /// On failure the state is left as it was before the call.
    pub fn alternating_step(&mut self, batch: &PairBatch) -> Result<StepReport> {
        if batch.len() < 2 {
            return Err(invalid("alternating_step needs a batch of at least 2 pairs"));
        }
        let snapshot = (
            self.store.clone(),
            self.encoder_opt.clone(),
            self.masking_opt.clone(),
            self.rng.clone(),
        );
        let result = self.step_inner(batch);
        if result.is_err() {
            (self.store, self.encoder_opt, self.masking_opt, self.rng) = snapshot;
        }
        result
    }

    fn step_inner(&mut self, batch: &PairBatch) -> Result<StepReport> {
        let w = self.weights();
        let fixed = match self.config.augmentation {
            Augmentation::Random => Some(self.draw_masks(batch)),
            Augmentation::Adversarial => None,
        };

        let (loss, entropy_v, entropy_t) = phase(Phase::Encoder, || {
            let mut tape = Tape::with_trainable(Trainable::only(self.model.encoder_ids()));
            let vars = uniclam_loss_on(&mut tape, &self.store, &self.model, batch, &w, fixed.as_ref())?;
            let loss = vars.breakdown(&tape, &w);
            let ent = (vars.clam_v.entropy, vars.clam_t.entropy);
            let grads = tape.backward(vars.total)?;
            adam_step(&mut self.store, &grads, &mut self.encoder_opt)?;
            Ok((loss, ent.0, ent.1))
        })?;

        let (encoder_post, masking_pre, masking_post) = phase(Phase::Masking, || match &fixed {
            Some(f) => {
                let after = uniclam_loss(&self.store, &self.model, batch, &w, Some(f))?;
                let obj = after.l_clam_v + after.l_clam_t;
                Ok((after.total, obj, obj))
            }
            None => {
                let mut encoder_post = 0.0;
                let mut pre = 0.0;
                for k in 0..self.config.masking_steps {
                    let mut tape = Tape::with_trainable(Trainable::only(self.model.masking_ids()));
                    let vars = uniclam_loss_on(&mut tape, &self.store, &self.model, batch, &w, None)?;
                    if k == 0 {
                        encoder_post = tape.value(vars.total).item();
                        pre = tape.value(vars.masking_objective).item();
                    }
                    let root = tape.scale(vars.masking_objective, -1.0)?;
                    let grads = tape.backward(root)?;
                    adam_step(&mut self.store, &grads, &mut self.masking_opt)?;
                }
                let after = uniclam_loss(&self.store, &self.model, batch, &w, None)?;
                Ok((encoder_post, pre, after.l_clam_v + after.l_clam_t))
            }
        })?;

        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            encoder_post,
            masking_pre,
            masking_post,
            entropy_v,
            entropy_t,
        })
    }
}

/// Runs `f`, reporting non-finite values as a divergence of `which`.
fn phase<T>(which: Phase, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        Error::NonFinite { .. } => Error::Divergence { phase: which },
        other => other,
    })
}

#[cfg(test)]
mod tests;
