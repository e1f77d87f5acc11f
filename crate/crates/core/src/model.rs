//! The full pretraining model: two encoders and two mask generators over
//! one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, EncoderStack, Modality};
use crate::error::Result;
use crate::masking::{MaskingModels, TextMasker, VisionMasker};
use crate::params::{ParamId, ParamStore};

/// How the two encoders' transformer blocks are related.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingMode {
    /// Separate blocks coupled by the depth-decaying penalty.
    #[default]
    Gradual,
    /// One set of blocks used by both encoders.
    Hard,
    /// Separate, uncoupled blocks.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub ev: EncoderStack,
    pub et: EncoderStack,
    pub masks: MaskingModels,
}

impl Model {
    pub fn new(
        config: &EncoderConfig,
        n_v: usize,
        n_t: usize,
        sharing: SharingMode,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ev = EncoderStack::new(config, Modality::Vision, store, "ev", rng)?;
        let et = match sharing {
            SharingMode::Hard => {
                EncoderStack::with_shared_blocks(config, Modality::Text, store, "et", rng, ev.blocks.clone())?
            }
            SharingMode::Gradual | SharingMode::None => EncoderStack::new(config, Modality::Text, store, "et", rng)?,
        };
        let masks = MaskingModels {
            vision: VisionMasker::new(store, "mv", n_v, rng)?,
            text: TextMasker::new(store, "mt", n_t, config.hidden, config.heads, rng)?,
        };
        Ok(Self { ev, et, masks })
    }

    /// Encoder parameters, each id once (tied blocks are listed once).
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ev.param_ids();
        for id in self.et.param_ids() {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        ids
    }

    pub fn masking_ids(&self) -> Vec<ParamId> {
        self.masks.param_ids()
    }
}
