//! Depth-decaying L2 coupling between corresponding blocks of the two
//! encoders.

use crate::autodiff::{Tape, Var};
use crate::encoders::EncoderStack;
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;

/// Coefficient `e^{(K-k)/K} - 1` of layer `k` (1-based) for `1 <= k < K`.
pub fn layer_weight(k: usize, layers: usize) -> Result<f64> {
    if k < 1 || k >= layers {
        return Err(invalid(format!("layer index {k} outside 1..{layers}")));
    }
    Ok(((layers - k) as f64 / layers as f64).exp() - 1.0)
}

/// The coefficients for `k = 1..K-1`.
pub fn sharing_weights(layers: usize) -> Result<Vec<f64>> {
    (1..layers).map(|k| layer_weight(k, layers)).collect()
}

fn check_compatible(store: &ParamStore, ev: &EncoderStack, et: &EncoderStack) -> Result<()> {
    if ev.blocks.len() != et.blocks.len() {
        return Err(invalid(format!(
            "encoders have {} and {} layers",
            ev.blocks.len(),
            et.blocks.len()
        )));
    }
    for (k, (bv, bt)) in ev.blocks.iter().zip(&et.blocks).enumerate() {
        for (a, b) in bv.ids().into_iter().zip(bt.ids()) {
            if store.get(a).shape() != store.get(b).shape() {
                return Err(Error::Compat {
                    name: format!("layer {}", k + 1),
                    msg: format!(
                        "{} has shape {:?} but {} has shape {:?}",
                        store.name(a),
                        store.get(a).shape(),
                        store.name(b),
                        store.get(b).shape()
                    ),
                });
            }
        }
    }
    Ok(())
}

/// `sum_{k<K} c_k ||flat(block_k(ev)) - flat(block_k(et))||^2` recorded on
/// `tape`. Embedders, the final norm and projection heads are not coupled.
pub fn sharing_penalty_on(tape: &mut Tape, store: &ParamStore, ev: &EncoderStack, et: &EncoderStack) -> Result<Var> {
    check_compatible(store, ev, et)?;
    let layers = ev.blocks.len();
    let mut total: Option<Var> = None;
    for k in 1..layers {
        let c = layer_weight(k, layers)?;
        let (bv, bt) = (&ev.blocks[k - 1], &et.blocks[k - 1]);
        for (a, b) in bv.ids().into_iter().zip(bt.ids()) {
            let va = tape.param(store, a)?;
            let vb = tape.param(store, b)?;
            let d = tape.sub(va, vb)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq)?;
            let term = tape.scale(s, c)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(crate::tensor::Tensor::scalar(0.0)),
    }
}

/// Value of the sharing penalty.
pub fn sharing_penalty(store: &ParamStore, ev: &EncoderStack, et: &EncoderStack) -> Result<f64> {
    let mut tape = Tape::inference();
    let v = sharing_penalty_on(&mut tape, store, ev, et)?;
    Ok(tape.value(v).item())
}
