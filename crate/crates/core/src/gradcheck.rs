//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Maximum relative error per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: None,
        }
    }
}

fn eval<F>(store: &ParamStore, seed: u64, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore, u64) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let root = f(&mut tape, store, seed)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::Backward(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `loss` against central differences
/// for every parameter in `ids`.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(
    store: &ParamStore,
    ids: &[ParamId],
    seed: u64,
    opts: GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore, u64) -> Result<Var>,
{
    let first = eval(store, seed, &loss)?;
    let second = eval(store, seed, &loss)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let root = loss(&mut tape, store, seed)?;
    for &id in ids {
        tape.param(store, id)?;
    }
    let grads = tape.backward(root)?;

    let mut work = store.clone();
    let mut entries = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| crate::tensor::Tensor::zeros(store.get(id).shape().to_vec()));
        let n = store.get(id).len();
        let step = match opts.max_coords {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        for c in (0..n).step_by(step) {
            let orig = store.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval(&work, seed, &loss)?;
            work.get_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval(&work, seed, &loss)?;
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let rel = (analytic.data()[c] - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            max_rel_error: max_rel,
            coords_checked: checked,
        });
    }
    Ok(GradCheckReport { entries })
}
