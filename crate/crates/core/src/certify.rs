//! Gradient certification: every training loss checked against central
//! differences on seeded toy configurations in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{info_nce_on, text_clam_on, uniclam_loss_on, vision_clam_on, LossWeights, PairBatch};
use crate::data::generate_corpus;
use crate::encoders::EncoderConfig;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::masking::MaskSemantics;
use crate::model::{Model, SharingMode};
use crate::params::ParamStore;
use crate::sharing::sharing_penalty_on;
use crate::tensor::Tensor;
use crate::vqa::{nll_on, vqa_items, FinetuneConfig, FinetuneState, VqaItem};

/// Largest accepted relative error.
pub const CERTIFY_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Certificate {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error() < CERTIFY_TOLERANCE
    }
}

fn toy_config(image_size: usize, patch_size: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        patch_size,
        vocab_size: 24,
        q_max: 12,
        proj_dim: 4,
        image_size,
        positional: true,
    }
}

fn toy_model(cfg: &EncoderConfig, seed: u64) -> Result<(ParamStore, Model)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Model::new(cfg, 2, 2, SharingMode::Gradual, &mut store, &mut rng)?;
    Ok((store, m))
}

fn toy_batch(seed: u64, lens: &[usize]) -> PairBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PairBatch {
        images: Tensor::from_fn(vec![lens.len(), 8, 8], |_| rng.random_range(0.0..1.0)),
        texts: lens
            .iter()
            .map(|&l| (0..l).map(|_| rng.random_range(2..24)).collect())
            .collect(),
    }
}

fn opts(max_coords: usize) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        max_coords: Some(max_coords),
    }
}

/// Sharing penalty over both encoder stacks.
pub fn certify_sharing_penalty() -> Result<Certificate> {
    let (store, m) = toy_model(&toy_config(8, 4), 11)?;
    let mut ids = m.ev.param_ids();
    ids.extend(m.et.param_ids());
    let report = grad_check(&store, &ids, 0, opts(16), |t, s, _| {
        sharing_penalty_on(t, s, &m.ev, &m.et)
    })?;
    Ok(Certificate {
        loss: "sharing_penalty",
        report,
    })
}

/// InfoNCE on free unit-scale embeddings.
pub fn certify_info_nce() -> Result<Certificate> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let a = store.register("anchors", Tensor::from_fn(vec![4, 6], |_| rng.random_range(-1.0..1.0)))?;
    let p = store.register(
        "positives",
        Tensor::from_fn(vec![4, 6], |_| rng.random_range(-1.0..1.0)),
    )?;
    let report = grad_check(&store, &[a, p], 0, GradCheckOptions::default(), |t, s, _| {
        let (av, pv) = (t.param(s, a)?, t.param(s, p)?);
        info_nce_on(t, av, pv, 0.1)
    })?;
    Ok(Certificate {
        loss: "info_nce",
        report,
    })
}

/// Vision CLAM loss through the vision encoder and mask generator.
pub fn certify_clam_vision() -> Result<Certificate> {
    let (store, m) = toy_model(&toy_config(8, 4), 17)?;
    let images = toy_batch(17, &[3, 3, 3]).images;
    let mut ids = m.ev.param_ids();
    ids.extend(m.masks.vision.param_ids());
    let report = grad_check(&store, &ids, 0, opts(16), |t, s, _| {
        Ok(vision_clam_on(t, s, &m.ev, &m.masks.vision, &images, None, 0.1, MaskSemantics::Occlude)?.loss)
    })?;
    Ok(Certificate {
        loss: "clam_vision",
        report,
    })
}

/// Text CLAM loss over mixed-length questions.
pub fn certify_clam_text() -> Result<Certificate> {
    let (store, m) = toy_model(&toy_config(8, 4), 19)?;
    let texts = toy_batch(19, &[3, 2, 3]).texts;
    let mut ids = m.et.param_ids();
    ids.extend(m.masks.text.param_ids());
    let report = grad_check(&store, &ids, 0, opts(16), |t, s, _| {
        Ok(text_clam_on(t, s, &m.et, &m.masks.text, &texts, None, 0.1, MaskSemantics::Occlude)?.loss)
    })?;
    Ok(Certificate {
        loss: "clam_text",
        report,
    })
}

/// Full pretraining objective over every parameter.
pub fn certify_uniclam_total() -> Result<Certificate> {
    let (store, m) = toy_model(&toy_config(8, 4), 23)?;
    let b = toy_batch(23, &[3, 2]);
    let w = LossWeights::default();
    let ids: Vec<_> = store.ids().collect();
    let report = grad_check(&store, &ids, 0, opts(6), |t, s, _| {
        Ok(uniclam_loss_on(t, s, &m, &b, &w, None)?.total)
    })?;
    Ok(Certificate {
        loss: "uniclam_total",
        report,
    })
}

/// Fine-tuning cross-entropy through the fusion head and both encoders.
pub fn certify_vqa_nll() -> Result<Certificate> {
    let (store, m) = toy_model(&toy_config(32, 8), 29)?;
    let st = FinetuneState::new(store, m, FinetuneConfig::default(), 29)?;
    let items: Vec<VqaItem> = vqa_items(&generate_corpus(0, 1))[..2].to_vec();
    let refs: Vec<&VqaItem> = items.iter().collect();
    let report = grad_check(&st.store, &st.trainable_ids(), 0, opts(6), |t, s, _| {
        nll_on(t, s, &st.model.ev, &st.model.et, &st.head, &refs)
    })?;
    Ok(Certificate {
        loss: "vqa_nll",
        report,
    })
}

/// Every certificate, in a fixed order.
pub fn certification_suite() -> Result<Vec<Certificate>> {
    Ok(vec![
        certify_sharing_penalty()?,
        certify_info_nce()?,
        certify_clam_vision()?,
        certify_clam_text()?,
        certify_uniclam_total()?,
        certify_vqa_nll()?,
    ])
}
