//! Answer classification over pre-trained encoders: bilinear-plus-MLP
//! fusion of pooled features, a linear classifier and the fine-tuning loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Trainable, Var};
use crate::contrastive::length_groups;
use crate::data::{SceneSample, ANSWER_SPACE, NO, OPEN_ANSWERS, YES};
use crate::encoders::EncoderStack;
use crate::error::{invalid, Error, Phase, Result};
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::params::{init_normal, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::linear_layer;

/// Fusion and classifier parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaHead {
    /// Bilinear interaction `[h, h]`.
    pub w_bil: ParamId,
    /// `[3h, 2h]`, `[2h]`.
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[2h, h]`, `[h]`.
    pub w2: ParamId,
    pub b2: ParamId,
    /// `[h, ANSWER_SPACE]`, `[ANSWER_SPACE]`.
    pub wc: ParamId,
    pub bc: ParamId,
}

impl VqaHead {
    pub const PREFIX: &'static str = "vqa";

    pub fn new(store: &mut ParamStore, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let h = hidden;
        let p = Self::PREFIX;
        Ok(Self {
            w_bil: store.register(format!("{p}.bilinear"), init_normal(rng, &[h, h], h))?,
            w1: store.register(format!("{p}.mlp.w1"), init_normal(rng, &[3 * h, 2 * h], 3 * h))?,
            b1: store.register(format!("{p}.mlp.b1"), Tensor::zeros(vec![2 * h]))?,
            w2: store.register(format!("{p}.mlp.w2"), init_normal(rng, &[2 * h, h], 2 * h))?,
            b2: store.register(format!("{p}.mlp.b2"), Tensor::zeros(vec![h]))?,
            wc: store.register(format!("{p}.cls.w"), init_normal(rng, &[h, ANSWER_SPACE], h))?,
            bc: store.register(format!("{p}.cls.b"), Tensor::zeros(vec![ANSWER_SPACE]))?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_bil, self.w1, self.b1, self.w2, self.b2, self.wc, self.bc]
    }
}

/// One image-question-answer triple.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaItem {
    /// `[H, W]`.
    pub image: Tensor,
    pub question: Vec<usize>,
    pub answer: usize,
    pub open: bool,
}

/// Every QA pair of `samples`, in order.
pub fn vqa_items(samples: &[SceneSample]) -> Vec<VqaItem> {
    samples
        .iter()
        .flat_map(|s| {
            s.qa_pairs.iter().map(|qa| VqaItem {
                image: s.image.clone(),
                question: qa.question.clone(),
                answer: qa.answer,
                open: qa.open,
            })
        })
        .collect()
}

/// Training and held-out items: the first 80% of samples and the rest.
pub fn split_items(samples: &[SceneSample]) -> (Vec<VqaItem>, Vec<VqaItem>) {
    let cut = samples.len() * 4 / 5;
    (vqa_items(&samples[..cut]), vqa_items(&samples[cut..]))
}

/// Pooled, pre-projection features `[B, h]` of the images and questions.
pub fn pooled_on(
    tape: &mut Tape,
    store: &ParamStore,
    ev: &EncoderStack,
    et: &EncoderStack,
    items: &[&VqaItem],
) -> Result<(Var, Var)> {
    let Some(first) = items.first() else {
        return Err(invalid("empty VQA batch"));
    };
    let s = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.image.len());
    for it in items {
        if it.image.shape() != s.as_slice() {
            return Err(invalid("VQA batch images must share one shape"));
        }
        data.extend_from_slice(it.image.data());
    }
    let images = tape.constant(Tensor::new(vec![items.len(), s[0], s[1]], data)?)?;
    let tokens = ev.embed_images_on(tape, store, images)?;
    let pv = ev.forward(tape, store, tokens)?.pooled;

    let questions: Vec<Vec<usize>> = items.iter().map(|it| it.question.clone()).collect();
    let mut parts = Vec::new();
    let mut rows = vec![0; items.len()];
    let mut offset = 0;
    for (_, idx) in length_groups(&questions) {
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| questions[i].as_slice()).collect();
        let emb = et.embed_texts_on(tape, store, &seqs)?;
        parts.push(et.forward(tape, store, emb)?.pooled);
        for (p, &i) in idx.iter().enumerate() {
            rows[i] = offset + p;
        }
        offset += idx.len();
    }
    let pt = tape.concat(&parts, 0)?;
    let pt = tape.gather_rows(pt, &rows)?;
    Ok((pv, pt))
}

/// Answer logits `[B, ANSWER_SPACE]` from pooled features.
pub fn head_on(tape: &mut Tape, store: &ParamStore, head: &VqaHead, pv: Var, pt: Var) -> Result<Var> {
    let wb = tape.param(store, head.w_bil)?;
    let inter = tape.matmul(pv, wb)?;
    let inter = tape.mul(inter, pt)?;
    let fused = tape.concat(&[pv, pt, inter], 1)?;
    let x = linear_layer(tape, store, fused, head.w1, head.b1)?;
    let x = tape.relu(x)?;
    let x = linear_layer(tape, store, x, head.w2, head.b2)?;
    let x = tape.relu(x)?;
    linear_layer(tape, store, x, head.wc, head.bc)
}

pub fn logits_on(
    tape: &mut Tape,
    store: &ParamStore,
    ev: &EncoderStack,
    et: &EncoderStack,
    head: &VqaHead,
    items: &[&VqaItem],
) -> Result<Var> {
    let (pv, pt) = pooled_on(tape, store, ev, et, items)?;
    head_on(tape, store, head, pv, pt)
}

/// Mean negative log-likelihood of the items' answers.
pub fn nll_on(
    tape: &mut Tape,
    store: &ParamStore,
    ev: &EncoderStack,
    et: &EncoderStack,
    head: &VqaHead,
    items: &[&VqaItem],
) -> Result<Var> {
    if let Some(bad) = items.iter().find(|it| it.answer >= ANSWER_SPACE) {
        return Err(invalid(format!(
            "answer id {} outside the answer space of {ANSWER_SPACE}",
            bad.answer
        )));
    }
    let logits = logits_on(tape, store, ev, et, head, items)?;
    let logp = tape.log_softmax(logits)?;
    let mut onehot = vec![0.0; items.len() * ANSWER_SPACE];
    for (i, it) in items.iter().enumerate() {
        onehot[i * ANSWER_SPACE + it.answer] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![items.len(), ANSWER_SPACE], onehot)?)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / items.len() as f64)
}

/// Softmax distribution over the answer space for one item.
pub fn predict_answer(
    store: &ParamStore,
    ev: &EncoderStack,
    et: &EncoderStack,
    head: &VqaHead,
    item: &VqaItem,
) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let logits = logits_on(&mut tape, store, ev, et, head, &[item])?;
    let p = tape.softmax(logits, 1)?;
    Ok(tape.value(p).data().to_vec())
}

/// Highest-scoring class among those valid for the question kind: the
/// open classes for open questions, yes and no for closed ones.
pub fn restricted_argmax(scores: &[f64], open: bool) -> usize {
    let range = if open { 0..OPEN_ANSWERS } else { YES..NO + 1 };
    range
        .clone()
        .fold(range.start, |best, c| if scores[c] > scores[best] { c } else { best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the split has no open questions.
    pub accuracy_open: Option<f64>,
    pub accuracy_closed: Option<f64>,
    pub accuracy_overall: f64,
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
    pub n_eval: u64,
}

impl EvalReport {
    /// Open and closed question counts, read from the confusion rows.
    pub fn counts(&self) -> (u64, u64) {
        let row = |r: &Vec<u64>| r.iter().sum::<u64>();
        let open = self.confusion[..OPEN_ANSWERS].iter().map(row).sum();
        let closed = self.confusion[OPEN_ANSWERS..].iter().map(row).sum();
        (open, closed)
    }
}

/// Rows scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

pub fn evaluate(
    store: &ParamStore,
    ev: &EncoderStack,
    et: &EncoderStack,
    head: &VqaHead,
    items: &[VqaItem],
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(invalid("evaluation needs at least one item"));
    }
    let mut confusion = vec![vec![0u64; ANSWER_SPACE]; ANSWER_SPACE];
    let (mut hit, mut n) = ([0u64; 2], [0u64; 2]);
    for chunk in items.chunks(EVAL_CHUNK) {
        let refs: Vec<&VqaItem> = chunk.iter().collect();
        let mut tape = Tape::inference();
        let logits = logits_on(&mut tape, store, ev, et, head, &refs)?;
        for (it, row) in chunk.iter().zip(tape.value(logits).data().chunks(ANSWER_SPACE)) {
            if it.answer >= ANSWER_SPACE {
                return Err(invalid(format!("answer id {} outside the answer space", it.answer)));
            }
            let pred = restricted_argmax(row, it.open);
            confusion[it.answer][pred] += 1;
            let k = usize::from(!it.open);
            n[k] += 1;
            hit[k] += u64::from(pred == it.answer);
        }
    }
    let frac = |h: u64, n: u64| (n > 0).then(|| h as f64 / n as f64);
    Ok(EvalReport {
        accuracy_open: frac(hit[0], n[0]),
        accuracy_closed: frac(hit[1], n[1]),
        accuracy_overall: (hit[0] + hit[1]) as f64 / (n[0] + n[1]) as f64,
        confusion,
        n_eval: n[0] + n[1],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub adam: AdamConfig,
    pub freeze_encoders: bool,
    pub batch: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            freeze_encoders: false,
            batch: 16,
        }
    }
}

/// Pre-trained model plus answer head under fine-tuning.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub store: ParamStore,
    pub model: Model,
    pub head: VqaHead,
    pub opt: OptimizerState,
    pub config: FinetuneConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl FinetuneState {
    /// Adds a fresh head to `store`, drawn from a generator seeded by `seed`.
    pub fn new(mut store: ParamStore, model: Model, config: FinetuneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let head = VqaHead::new(&mut store, model.ev.config.hidden, &mut rng)?;
        let opt = OptimizerState::new(config.adam, &store, &Self::trainable(&model, &head, &config));
        Ok(Self {
            store,
            model,
            head,
            opt,
            config,
            rng,
            step: 0,
        })
    }

    fn trainable(model: &Model, head: &VqaHead, config: &FinetuneConfig) -> Vec<ParamId> {
        let mut ids = head.param_ids();
        if !config.freeze_encoders {
            ids.extend(model.encoder_ids());
        }
        ids
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        Self::trainable(&self.model, &self.head, &self.config)
    }

    /// A random training batch of `config.batch` items (fewer if the set is smaller).
    pub fn sample_batch<'a>(&mut self, items: &'a [VqaItem]) -> Vec<&'a VqaItem> {
        let mut refs: Vec<&VqaItem> = items.iter().collect();
        let (chosen, _) = refs.partial_shuffle(&mut self.rng, self.config.batch);
        chosen.to_vec()
    }

    pub fn evaluate(&self, items: &[VqaItem]) -> Result<EvalReport> {
        evaluate(&self.store, &self.model.ev, &self.model.et, &self.head, items)
    }
}

/// One Adam update on `batch`; returns the loss before the update. On
/// failure the state is unchanged.
pub fn finetune_step(state: &mut FinetuneState, batch: &[&VqaItem]) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("finetune_step needs a nonempty batch"));
    }
    let ids = state.trainable_ids();
    let mut tape = Tape::with_trainable(Trainable::only(ids));
    let loss = nll_on(
        &mut tape,
        &state.store,
        &state.model.ev,
        &state.model.et,
        &state.head,
        batch,
    )
    .map_err(divergence)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).map_err(divergence)?;
    adam_step(&mut state.store, &grads, &mut state.opt).map_err(divergence)?;
    state.step += 1;
    Ok(value)
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence { phase: Phase::Finetune },
        other => other,
    }
}
