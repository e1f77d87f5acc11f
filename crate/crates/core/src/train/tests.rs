use super::*;
use crate::autodiff::Gradients;
use crate::contrastive::uniclam_loss_on;
use crate::tensor::Tensor;
use rand::Rng;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        patch_size: 4,
        vocab_size: 10,
        q_max: 6,
        proj_dim: 4,
        image_size: 8,
        positional: true,
    }
}

fn batch(seed: u64, n: usize) -> PairBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PairBatch {
        images: Tensor::from_fn(vec![n, 8, 8], |_| rng.random_range(0.0..1.0)),
        texts: (0..n)
            .map(|i| (0..2 + i % 3).map(|_| rng.random_range(2..10)).collect())
            .collect(),
    }
}

fn state(config: TrainConfig, seed: u64) -> TrainState {
    TrainState::new(&tiny(), 2, 2, config, seed).unwrap()
}

fn hand_adam(store: &mut ParamStore, grads: &Gradients, ids: &[crate::params::ParamId], c: &AdamConfig) {
    for &id in ids {
        let Some(g) = grads.param(id) else { continue };
        let p = store.get_mut(id).data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            let m = (1.0 - c.beta1) * gk;
            let v = (1.0 - c.beta2) * gk * gk;
            let mhat = m / (1.0 - c.beta1);
            let vhat = v / (1.0 - c.beta2);
            p[k] = (p[k] - c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[k])) as f32 as f64;
        }
    }
}

#[test]
fn groups_partition_parameters() {
    for sharing in [SharingMode::Gradual, SharingMode::Hard, SharingMode::None] {
        let st = state(
            TrainConfig {
                sharing,
                ..TrainConfig::default()
            },
            1,
        );
        let enc = st.model.encoder_ids();
        let mask = st.model.masking_ids();
        assert!(enc.iter().all(|id| !mask.contains(id)));
        assert_eq!(enc.len() + mask.len(), st.store.len());
    }
}

#[test]
fn one_step_matches_replay_oracle() {
    let mut st = state(TrainConfig::default(), 3);
    let b = batch(3, 4);
    let mut oracle = st.store.clone();
    let w = st.weights();

    let enc = st.model.encoder_ids();
    let mut tape = Tape::with_trainable(Trainable::only(enc.clone()));
    let vars = uniclam_loss_on(&mut tape, &oracle, &st.model, &b, &w, None).unwrap();
    let g = tape.backward(vars.total).unwrap();
    hand_adam(&mut oracle, &g, &enc, &st.config.encoder_adam);

    let mask = st.model.masking_ids();
    let mut tape = Tape::with_trainable(Trainable::only(mask.clone()));
    let vars = uniclam_loss_on(&mut tape, &oracle, &st.model, &b, &w, None).unwrap();
    let root = tape.scale(vars.masking_objective, -1.0).unwrap();
    let g = tape.backward(root).unwrap();
    hand_adam(&mut oracle, &g, &mask, &st.config.masking_adam);

    st.alternating_step(&b).unwrap();
    for id in st.store.ids() {
        assert_eq!(st.store.get(id), oracle.get(id), "{}", st.store.name(id));
    }
}

#[test]
fn zero_masking_rate_freezes_generators() {
    let cfg = TrainConfig {
        masking_adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut st = state(cfg, 5);
    let before = st.store.clone();
    for s in 0..3 {
        st.alternating_step(&batch(s, 4)).unwrap();
    }
    for id in st.model.masking_ids() {
        assert_eq!(st.store.get(id), before.get(id));
    }
    assert!(st
        .model
        .encoder_ids()
        .iter()
        .any(|&id| st.store.get(id) != before.get(id)));
}

#[test]
fn zero_encoder_rate_freezes_encoders() {
    let cfg = TrainConfig {
        encoder_adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut st = state(cfg, 6);
    let before = st.store.clone();
    let r = st.alternating_step(&batch(6, 4)).unwrap();
    for id in st.model.encoder_ids() {
        assert_eq!(st.store.get(id), before.get(id));
    }
    assert_eq!(r.encoder_post, r.loss.total);
}

#[test]
fn masking_ascent_follows_finite_difference_sign() {
    let cfg = TrainConfig {
        encoder_adam: AdamConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        masking_adam: AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut st = state(cfg, 7);
    let theta = st.model.masks.vision.head_b;
    st.masking_opt = OptimizerState::new(st.config.masking_adam, &st.store, &[theta]);
    let b = batch(7, 4);
    let w = st.weights();
    let objective = |store: &ParamStore| {
        let l = uniclam_loss(store, &st.model, &b, &w, None).unwrap();
        l.l_clam_v + l.l_clam_t
    };
    let before = st.store.get(theta).clone();
    let mut fd = Vec::new();
    for k in 0..before.len() {
        let mut plus = st.store.clone();
        plus.get_mut(theta).data_mut()[k] += 1e-5;
        let mut minus = st.store.clone();
        minus.get_mut(theta).data_mut()[k] -= 1e-5;
        fd.push((objective(&plus) - objective(&minus)) / 2e-5);
    }
    let r = st.alternating_step(&b).unwrap();
    let after = st.store.get(theta);
    for k in 0..before.len() {
        if fd[k].abs() > 1e-6 {
            assert_eq!(
                (after.data()[k] - before.data()[k]).signum(),
                fd[k].signum(),
                "coordinate {k}"
            );
        }
    }
    assert!(r.masking_post > r.masking_pre);
}

#[test]
fn identical_seeds_are_bit_identical() {
    let run = |aug| {
        let mut st = state(
            TrainConfig {
                augmentation: aug,
                ..TrainConfig::default()
            },
            11,
        );
        let reports: Vec<_> = (0..4).map(|s| st.alternating_step(&batch(s, 3)).unwrap()).collect();
        (st.store, reports)
    };
    for aug in [Augmentation::Adversarial, Augmentation::Random] {
        let (a, ra) = run(aug);
        let (b, rb) = run(aug);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}

#[test]
fn random_augmentation_leaves_generators_idle() {
    let mut st = state(
        TrainConfig {
            augmentation: Augmentation::Random,
            ..TrainConfig::default()
        },
        13,
    );
    let before = st.store.clone();
    let r = st.alternating_step(&batch(13, 4)).unwrap();
    for id in st.model.masking_ids() {
        assert_eq!(st.store.get(id), before.get(id));
    }
    assert_eq!(r.masking_pre, r.masking_post);
    assert_eq!(r.entropy_v, 0.0);
    assert_eq!(r.entropy_t, 0.0);
}

#[test]
fn divergence_restores_state_and_names_phase() {
    let mut st = state(TrainConfig::default(), 17);
    let id = st.model.ev.blocks[0].wq;
    st.store.get_mut(id).data_mut()[0] = f64::INFINITY;
    let before = st.store.clone();
    let err = st.alternating_step(&batch(17, 4)).unwrap_err();
    assert!(matches!(err, Error::Divergence { phase: Phase::Encoder }), "{err}");
    assert_eq!(st.store, before);
    assert_eq!(st.step, 0);
    assert_eq!(st.encoder_opt.step, 0);
}

#[test]
fn schedule_weights() {
    let mut st = state(
        TrainConfig {
            unified: Unified::Sequential,
            total_steps: 4,
            sharing: SharingMode::None,
            ..TrainConfig::default()
        },
        19,
    );
    assert_eq!(st.weights().beta, 1.0);
    assert_eq!(st.weights().lambda, 0.0);
    st.step = 2;
    assert_eq!(st.weights().beta, 0.0);
    let st = state(TrainConfig::default(), 19);
    assert_eq!((st.weights().beta, st.weights().lambda), (0.3, 1e-3));
}

#[test]
fn batch_of_one_rejected() {
    let mut st = state(TrainConfig::default(), 23);
    assert!(st.alternating_step(&batch(23, 1)).is_err());
}
