//! Pre-norm transformer block shared by the encoders and the text masker.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{init_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Parameter ids of one transformer block, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Width of the block's hidden MLP layer relative to the model width.
pub const MLP_RATIO: usize = 2;

impl BlockParams {
    pub fn register(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let h = hidden;
        let f = MLP_RATIO * h;
        let mut reg = |name: &str, t: Tensor| store.register(format!("{prefix}.{name}"), t);
        Ok(Self {
            ln1_g: reg("ln1.gamma", Tensor::full(vec![h], 1.0))?,
            ln1_b: reg("ln1.beta", Tensor::zeros(vec![h]))?,
            wq: reg("attn.wq", init_normal(rng, &[h, h], h))?,
            bq: reg("attn.bq", Tensor::zeros(vec![h]))?,
            wk: reg("attn.wk", init_normal(rng, &[h, h], h))?,
            bk: reg("attn.bk", Tensor::zeros(vec![h]))?,
            wv: reg("attn.wv", init_normal(rng, &[h, h], h))?,
            bv: reg("attn.bv", Tensor::zeros(vec![h]))?,
            wo: reg("attn.wo", init_normal(rng, &[h, h], h))?,
            bo: reg("attn.bo", Tensor::zeros(vec![h]))?,
            ln2_g: reg("ln2.gamma", Tensor::full(vec![h], 1.0))?,
            ln2_b: reg("ln2.beta", Tensor::zeros(vec![h]))?,
            w1: reg("mlp.w1", init_normal(rng, &[h, f], h))?,
            b1: reg("mlp.b1", Tensor::zeros(vec![f]))?,
            w2: reg("mlp.w2", init_normal(rng, &[f, h], f))?,
            b2: reg("mlp.b2", Tensor::zeros(vec![h]))?,
        })
    }

    /// All ids of the block, in declaration order.
    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln2_g,
            self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

fn linear(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = tape.param(store, w)?;
    let bv = tape.param(store, b)?;
    tape.affine(x, wv, bv)
}

/// Output of a block: the updated tokens and the fused attention node,
/// whose weights `[B*heads, T, T]` are read with
/// [`Tape::attention_weights`].
pub struct BlockOutput {
    pub tokens: Var,
    pub attention: Var,
}

/// `x + Attn(LN(x))` followed by `x + MLP(LN(x))` on `x[B, T, h]`.
pub fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &BlockParams,
    x: Var,
    heads: usize,
) -> Result<BlockOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return Err(invalid(format!(
            "transformer block expects [B, T, h] with h divisible by {heads}, got {s:?}"
        )));
    }
    let h = s[2];
    let dh = h / heads;

    let g1 = tape.param(store, p.ln1_g)?;
    let b1 = tape.param(store, p.ln1_b)?;
    let n1 = tape.layer_norm(x, g1, b1)?;
    let q = linear(tape, store, n1, p.wq, p.bq)?;
    let k = linear(tape, store, n1, p.wk, p.bk)?;
    let v = linear(tape, store, n1, p.wv, p.bv)?;
    let attention = tape.attention(q, k, v, heads, 1.0 / (dh as f64).sqrt())?;
    let o = linear(tape, store, attention, p.wo, p.bo)?;
    let x = tape.add(x, o)?;

    let g2 = tape.param(store, p.ln2_g)?;
    let b2 = tape.param(store, p.ln2_b)?;
    let n2 = tape.layer_norm(x, g2, b2)?;
    let hdn = linear(tape, store, n2, p.w1, p.b1)?;
    let hdn = tape.relu(hdn)?;
    let m = linear(tape, store, hdn, p.w2, p.b2)?;
    let tokens = tape.add(x, m)?;
    Ok(BlockOutput { tokens, attention })
}

pub(crate) fn linear_layer(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    linear(tape, store, x, w, b)
}
