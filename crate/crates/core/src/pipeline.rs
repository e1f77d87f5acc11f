//! End-to-end runs: pretraining over a corpus, model reconstruction from
//! checkpoints, fine-tuning and held-out evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::load_into;
use crate::config::RunConfig;
use crate::data::{pair_batch, sample_indices, SceneSample};
use crate::error::{invalid, Error, Result};
use crate::metrics::MetricsRow;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainState;
use crate::vqa::{finetune_step, split_items, EvalReport, FinetuneState, VqaHead};

/// Checkpoint name prefixes of the pretrained model.
pub const MODEL_PREFIXES: [&str; 4] = ["ev.", "et.", "mv.", "mt."];

/// Samples used for pretraining and fine-tuning; the rest are held out.
pub fn train_split(samples: &[SceneSample]) -> &[SceneSample] {
    &samples[..samples.len() * 4 / 5]
}

pub fn init_state(cfg: &RunConfig) -> Result<TrainState> {
    cfg.validate()?;
    TrainState::new(&cfg.encoder(), cfg.n_v, cfg.n_t, cfg.train(), cfg.seed)
}

/// Outcome of a pretraining run. On divergence `state` holds the last
/// good parameters and `divergence` the error.
pub struct Pretrained {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
    pub divergence: Option<Error>,
}

/// Runs `cfg.steps` alternating steps on batches drawn from the training
/// split, calling `on_row` after every step.
pub fn pretrain(cfg: &RunConfig, samples: &[SceneSample], on_row: impl FnMut(&MetricsRow)) -> Result<Pretrained> {
    let state = init_state(cfg)?;
    pretrain_from(cfg, state, samples, on_row)
}

pub fn pretrain_from(
    cfg: &RunConfig,
    mut state: TrainState,
    samples: &[SceneSample],
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Pretrained> {
    let pool = train_split(samples);
    if cfg.steps > 0 && pool.len() < cfg.batch {
        return Err(invalid(format!(
            "training split of {} samples is smaller than the batch of {}",
            pool.len(),
            cfg.batch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut rows = Vec::with_capacity(cfg.steps as usize);
    let mut divergence = None;
    for _ in 0..cfg.steps {
        let idx = sample_indices(&mut rng, pool.len(), cfg.batch)?;
        let batch = pair_batch(pool, &idx)?;
        let t0 = Instant::now();
        match state.alternating_step(&batch) {
            Ok(r) => {
                let wall = if cfg.record_wall_time {
                    t0.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                };
                let row = MetricsRow::from_report(&r, wall);
                on_row(&row);
                rows.push(row);
            }
            Err(e @ Error::Divergence { .. }) => {
                divergence = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Pretrained {
        state,
        rows,
        divergence,
    })
}

/// A model shaped by `cfg` with parameters from `tensors`.
pub fn load_model(cfg: &RunConfig, tensors: &[(String, Tensor)]) -> Result<(ParamStore, Model)> {
    let state = init_state(cfg)?;
    let (mut store, model) = (state.store, state.model);
    load_into(&mut store, tensors, &MODEL_PREFIXES)?;
    Ok((store, model))
}

/// A fine-tune state whose encoders (and head, when `with_head`) come from
/// `tensors`.
pub fn load_finetune(cfg: &RunConfig, tensors: &[(String, Tensor)], with_head: bool) -> Result<FinetuneState> {
    let (store, model) = load_model(cfg, tensors)?;
    let mut st = FinetuneState::new(store, model, cfg.finetune(), cfg.seed)?;
    if with_head {
        load_into(&mut st.store, tensors, &[VqaHead::PREFIX])?;
    }
    Ok(st)
}

/// Outcome of fine-tuning followed by held-out evaluation.
pub struct Finetuned {
    pub state: FinetuneState,
    pub losses: Vec<f64>,
    pub report: EvalReport,
    pub divergence: Option<Error>,
}

/// Fine-tunes for `cfg.finetune_steps` on the training split's QA pairs,
/// then evaluates on the held-out split.
pub fn finetune_and_evaluate(cfg: &RunConfig, mut state: FinetuneState, samples: &[SceneSample]) -> Result<Finetuned> {
    let (train, test) = split_items(samples);
    if test.is_empty() {
        return Err(invalid("dataset too small to hold out an evaluation split"));
    }
    let mut losses = Vec::with_capacity(cfg.finetune_steps as usize);
    let mut divergence = None;
    if !train.is_empty() {
        for _ in 0..cfg.finetune_steps {
            let batch = state.sample_batch(&train);
            match finetune_step(&mut state, &batch) {
                Ok(l) => losses.push(l),
                Err(e @ Error::Divergence { .. }) => {
                    divergence = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let report = state.evaluate(&test)?;
    Ok(Finetuned {
        state,
        losses,
        report,
        divergence,
    })
}

/// Held-out evaluation without training.
pub fn evaluate_held_out(state: &FinetuneState, samples: &[SceneSample]) -> Result<EvalReport> {
    let (_, test) = split_items(samples);
    if test.is_empty() {
        return Err(invalid("dataset too small to hold out an evaluation split"));
    }
    state.evaluate(&test)
}
