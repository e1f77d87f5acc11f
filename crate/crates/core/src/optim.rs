//! Adam with decoupled weight decay over a group of parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments and step counter for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, store: &ParamStore, ids: &[ParamId]) -> Self {
        let zeros = || {
            ids.iter()
                .map(|&id| Tensor::zeros(store.get(id).shape().to_vec()))
                .collect()
        };
        Self {
            config,
            step: 0,
            ids: ids.to_vec(),
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// First and second moments of `id`, if it belongs to the group.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        let i = self.ids.iter().position(|&x| x == id)?;
        Some((&self.m[i], &self.v[i]))
    }
}

/// One Adam update of every parameter in the group. Missing gradients
/// count as zero. A non-finite gradient rejects the whole step before any
/// parameter changes.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    for &id in &state.ids {
        if let Some(g) = grads.param(id) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Compat {
                    name: store.name(id).to_string(),
                    msg: format!(
                        "gradient shape {:?} differs from parameter {:?}",
                        g.shape(),
                        store.get(id).shape()
                    ),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam-step" });
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, &id) in state.ids.iter().enumerate() {
        let g = grads.param(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[k]);
            p[k] = p[k] as f32 as f64;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn grads_for(store: &ParamStore, id: ParamId, g: &[f64]) -> Gradients {
        let mut tape = Tape::new();
        let p = tape.param(store, id).unwrap();
        let c = tape.constant(Tensor::new(vec![g.len()], g.to_vec()).unwrap()).unwrap();
        let prod = tape.mul(p, c).unwrap();
        let root = tape.sum(prod).unwrap();
        tape.backward(root).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut store = ParamStore::new();
        let id = store
            .register("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let before = store.clone();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store, &[id]);
        for _ in 0..5 {
            let g = grads_for(&store, id, &[0.0, 0.0, 0.0]);
            adam_step(&mut store, &g, &mut st).unwrap();
        }
        assert_eq!(store, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_is_bias_corrected_unit_step() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store, &[id]);
        let g = grads_for(&store, id, &[1.0]);
        adam_step(&mut store, &g, &mut st).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - want).abs() < 1e-8);
        let (m, v) = st.moments(id).unwrap();
        assert!((m.data()[0] - 0.1).abs() < 1e-15);
        assert!((v.data()[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn recurrence_matches_hand_evaluation() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store, &[id]);
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in [0.5, -0.25, 1.5].into_iter().enumerate() {
            let grads = grads_for(&store, id, &[g]);
            adam_step(&mut store, &grads, &mut st).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            p = (p - 0.01 * (mh / (vh.sqrt() + 1e-8) + 0.1 * p)) as f32 as f64;
            assert_eq!(store.get(id).data()[0], p);
        }
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut store = ParamStore::new();
        let id = store
            .register("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut st = OptimizerState::new(AdamConfig::default(), &store, &[id]);
        let before = store.clone();
        let mut g = grads_for(&store, id, &[1.0, 1.0]);
        g.set_param(id, Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap());
        assert!(matches!(
            adam_step(&mut store, &g, &mut st),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(store, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store
                .register("w", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap())
                .unwrap();
            let mut st = OptimizerState::new(AdamConfig::default(), &store, &[id]);
            for _ in 0..100 {
                let p = store.get(id).data().to_vec();
                let g = grads_for(&store, id, &[p[0] - p[1], p[0] * p[1]]);
                adam_step(&mut store, &g, &mut st).unwrap();
            }
            store
        };
        assert_eq!(run(), run());
    }
}
