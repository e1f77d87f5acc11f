//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive application is appended to a [`Tape`] together with the
//! activations its backward rule needs. [`Tape::backward`] walks the tape in
//! reverse recording order, which is a valid reverse topological order
//! because a node's inputs are always recorded before the node itself.
//!
//! Parameters enter the tape through [`Tape::param`]; whether they receive a
//! gradient is decided by the tape's [`Trainable`] filter, so the same
//! forward code serves both halves of the min-max optimisation.

mod backward;
pub(crate) mod kernels;

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

use kernels::{axis_split, fast_exp, gemm, gemm_into, im2col, permute_into, softmax_rows, ConvGeom, MatRef};

pub use backward::Gradients;

#[cfg(test)]
mod tests;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which parameters receive gradients when loaded onto a tape.
#[derive(Debug, Clone, Default)]
pub enum Trainable {
    #[default]
    All,
    Nothing,
    Only(HashSet<ParamId>),
}

impl Trainable {
    pub fn only(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Trainable::Only(ids.into_iter().collect())
    }

    fn contains(&self, id: ParamId) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Only(set) => set.contains(&id),
        }
    }
}

/// Identifier of a primitive in the differentiable catalog, used by
/// [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    BatchMatMul { trans_b: bool },
    Transpose,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Add,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Ln,
    Relu,
    Softmax { axis: usize },
    LogSoftmax,
    LogSumExp,
    LayerNorm,
    MeanAxis { axis: usize },
    SumAxis { axis: usize },
    Sum,
    L2Norm,
    L2Normalize,
    CosineSimilarity,
    Conv2d { stride: usize, pad: usize },
    Conv1x1,
    UpsampleNearest { factor: usize },
    GatherRows(Vec<usize>),
    Concat { axis: usize },
    Attention { heads: usize, scale: f64 },
    Affine,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddScalar {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Ln {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
    },
    LogSumExp {
        a: Var,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    SumAxis {
        a: Var,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    L2Norm {
        a: Var,
    },
    L2Normalize {
        a: Var,
        norms: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        an: Vec<f64>,
        bn: Vec<f64>,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
    },
    Upsample {
        a: Var,
        factor: usize,
    },
    Gather {
        a: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Tensor,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Single-owner recording of primitive applications.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    trainable: Trainable,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape on which every parameter is trainable.
    pub fn new() -> Self {
        Self::with_trainable(Trainable::All)
    }

    pub fn with_trainable(trainable: Trainable) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            trainable,
            consumed: false,
        }
    }

    /// A tape for forward-only evaluation.
    pub fn inference() -> Self {
        Self::with_trainable(Trainable::Nothing)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed".into()));
        }
        // data movement cannot create non-finite values from checked inputs
        let moves = matches!(
            op,
            Op::Reshape { .. }
                | Op::Permute { .. }
                | Op::Upsample { .. }
                | Op::Gather { .. }
                | Op::Concat { .. }
                | Op::Relu { .. }
        );
        if !moves && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor. Non-finite inputs are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Loads a parameter; repeated loads of the same id share one node so
    /// tied parameters accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let rg = self.trainable.contains(id);
        let v = self.leaf(store.get(id).clone(), rg)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub(crate) fn param_vars(&self) -> &HashMap<ParamId, Var> {
        &self.params
    }

    /// Generic entry point over the primitive catalog.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{prim:?} expects {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match prim {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::BatchMatMul { trans_b } => {
                arity(2)?;
                if *trans_b {
                    self.bmm_nt(inputs[0], inputs[1])
                } else {
                    self.bmm(inputs[0], inputs[1])
                }
            }
            Primitive::Transpose => {
                arity(1)?;
                self.transpose(inputs[0])
            }
            Primitive::Permute(axes) => {
                arity(1)?;
                self.permute(inputs[0], axes)
            }
            Primitive::Reshape(shape) => {
                arity(1)?;
                self.reshape(inputs[0], shape)
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale(c) => {
                arity(1)?;
                self.scale(inputs[0], *c)
            }
            Primitive::AddScalar(c) => {
                arity(1)?;
                self.add_scalar(inputs[0], *c)
            }
            Primitive::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            Primitive::Ln => {
                arity(1)?;
                self.ln(inputs[0])
            }
            Primitive::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            Primitive::Softmax { axis } => {
                arity(1)?;
                self.softmax(inputs[0], *axis)
            }
            Primitive::LogSoftmax => {
                arity(1)?;
                self.log_softmax(inputs[0])
            }
            Primitive::LogSumExp => {
                arity(1)?;
                self.logsumexp(inputs[0], None)
            }
            Primitive::LayerNorm => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            Primitive::MeanAxis { axis } => {
                arity(1)?;
                self.mean_axis(inputs[0], *axis)
            }
            Primitive::SumAxis { axis } => {
                arity(1)?;
                self.sum_axis(inputs[0], *axis)
            }
            Primitive::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            Primitive::L2Norm => {
                arity(1)?;
                self.l2_norm(inputs[0])
            }
            Primitive::L2Normalize => {
                arity(1)?;
                self.l2_normalize(inputs[0])
            }
            Primitive::CosineSimilarity => {
                arity(2)?;
                self.cosine_similarity(inputs[0], inputs[1])
            }
            Primitive::Conv2d { stride, pad } => match inputs.len() {
                2 => self.conv2d(inputs[0], inputs[1], None, *stride, *pad),
                3 => self.conv2d(inputs[0], inputs[1], Some(inputs[2]), *stride, *pad),
                _ => arity(3).map(|_| unreachable!()),
            },
            Primitive::Conv1x1 => match inputs.len() {
                2 => self.conv1x1(inputs[0], inputs[1], None),
                3 => self.conv1x1(inputs[0], inputs[1], Some(inputs[2])),
                _ => arity(3).map(|_| unreachable!()),
            },
            Primitive::UpsampleNearest { factor } => {
                arity(1)?;
                self.upsample_nearest(inputs[0], *factor)
            }
            Primitive::GatherRows(ids) => {
                arity(1)?;
                self.gather_rows(inputs[0], ids)
            }
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Attention { heads, scale } => {
                arity(3)?;
                self.attention(inputs[0], inputs[1], inputs[2], *heads, *scale)
            }
            Primitive::Affine => {
                arity(3)?;
                self.affine(inputs[0], inputs[1], inputs[2])
            }
        }
    }

    fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
        Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
    }

    /// `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Self::shape_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(out_shape, out)?, Op::MatMul { a, b }, rg)
    }

    /// Batched `a[B, m, k] @ b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[B, m, k] @ b[B, n, k]^T`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Self::shape_err("batch-matmul", sa, sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Self::shape_err("batch-matmul", sa, sb));
        }
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            let am = MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bm = if trans_b {
                MatRef::row_major(&bd[i * n * k..(i + 1) * n * k], n, k).t()
            } else {
                MatRef::row_major(&bd[i * k * n..(i + 1) * k * n], k, n)
            };
            gemm(1.0, am, bm, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let rg = self.rg(&[a, b]);
        self.push(
            "batch-matmul",
            Tensor::new(vec![bs, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            rg,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Self::shape_err("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len()
            || axes
                .iter()
                .any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Self::shape_err("permute", &sa, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
        let mut out = vec![0.0; numel(&sa)];
        permute_into(self.value(a).data(), &sa, axes, &mut out);
        let rg = self.rg(&[a]);
        self.push(
            "permute",
            Tensor::new(out_shape, out)?,
            Op::Permute { a, axes: axes.to_vec() },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if numel(sa) != numel(shape) || shape.contains(&0) {
            return Err(Self::shape_err("reshape", sa, shape));
        }
        let value = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let rg = self.rg(&[a]);
        self.push("reshape", value, Op::Reshape { a }, rg)
    }

    /// `true` when `small` broadcasts over the leading axes of `big`.
    fn leading_broadcast(big: &[usize], small: &[usize]) -> bool {
        small.len() <= big.len() && big[big.len() - small.len()..] == *small
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !Self::leading_broadcast(sa, sb) {
            return Err(Self::shape_err("add", sa, sb));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bd.len()) {
            for (x, y) in chunk.iter_mut().zip(bd) {
                *x += y;
            }
        }
        let value = Tensor::new(sa.to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        self.push("add", value, Op::Add { a, b }, rg)
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !Self::leading_broadcast(sa, sb) {
            return Err(Self::shape_err("multiply", sa, sb));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bd.len()) {
            for (x, y) in chunk.iter_mut().zip(bd) {
                *x *= y;
            }
        }
        let value = Tensor::new(sa.to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        self.push("multiply", value, Op::Mul { a, b }, rg)
    }

    /// `a - b` with the same broadcast rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push("scalar-multiply", value, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push("add-scalar", value, Op::AddScalar { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push("exponent", value, Op::Exp { a }, rg)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push("logarithm", value, Op::Ln { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push("relu", value, Op::Relu { a }, rg)
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Self::shape_err("softmax", &sa, &[axis]));
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let x = self.value(a).data();
        if inner == 1 {
            let mut out = x.to_vec();
            softmax_rows(&mut out, len);
            let rg = self.rg(&[a]);
            return self.push("softmax", Tensor::new(sa, out)?, Op::Softmax { a, axis }, rg);
        }
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = fast_exp(x[at(l)] - mx);
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("softmax", Tensor::new(sa, out)?, Op::Softmax { a, axis }, rg)
    }

    /// Max-stabilised log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let Some(&len) = sa.last() else {
            return Err(Self::shape_err("log-softmax", &sa, &[]));
        };
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for (row, dst) in x.chunks(len).zip(out.chunks_mut(len)) {
            let lse = lse_masked(row, None);
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push("log-softmax", Tensor::new(sa, out)?, Op::LogSoftmax { a }, rg)
    }

    /// Max-stabilised log-sum-exp over the last axis. `mask`, when given,
    /// has one entry per element of `a`; `false` entries are excluded.
    pub fn logsumexp(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let Some(&len) = sa.last() else {
            return Err(Self::shape_err("log-sum-exp", &sa, &[]));
        };
        if let Some(m) = &mask {
            if m.len() != numel(&sa) {
                return Err(Self::shape_err("log-sum-exp", &sa, &[m.len()]));
            }
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(x.len() / len);
        for (r, row) in x.chunks(len).enumerate() {
            let rm = mask.as_ref().map(|m| &m[r * len..(r + 1) * len]);
            if rm.is_some_and(|m| !m.iter().any(|&b| b)) {
                return Err(Error::InvalidArgument(format!(
                    "log-sum-exp: row {r} has every entry masked out"
                )));
            }
            out.push(lse_masked(row, rm));
        }
        let out_shape = sa[..sa.len() - 1].to_vec();
        let rg = self.rg(&[a]);
        self.push(
            "log-sum-exp",
            Tensor::new(out_shape, out)?,
            Op::LogSumExp { a, mask },
            rg,
        )
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if sx.is_empty() || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Self::shape_err("layer-normalization", &sx, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            "layer-normalization",
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let name = if mean { "mean-along-axis" } else { "sum-along-axis" };
        if axis >= sa.len() {
            return Err(Self::shape_err(name, &sa, &[axis]));
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        let op = if mean {
            Op::MeanAxis { a, axis }
        } else {
            Op::SumAxis { a, axis }
        };
        self.push(name, Tensor::new(out_shape, out)?, op, rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm along the last axis.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let Some(&d) = sa.last() else {
            return Err(Self::shape_err("l2-norm", &sa, &[]));
        };
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[a]);
        self.push(
            "l2-norm",
            Tensor::new(sa[..sa.len() - 1].to_vec(), out)?,
            Op::L2Norm { a },
            rg,
        )
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let Some(&d) = sa.last() else {
            return Err(Self::shape_err("l2-normalize", &sa, &[]));
        };
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(x.len() / d);
        let mut out = vec![0.0; x.len()];
        for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let rg = self.rg(&[a]);
        self.push("l2-normalize", Tensor::new(sa, out)?, Op::L2Normalize { a, norms }, rg)
    }

    /// Pairwise cosine similarity of rows: `a[n, d], b[m, d] -> [n, m]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Self::shape_err("cosine-similarity", &sa, &sb));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let normalize = |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut out = vec![0.0; x.len()];
            let mut norms = Vec::with_capacity(x.len() / d);
            for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
                let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                norms.push(nr);
                for (o, v) in dst.iter_mut().zip(row) {
                    *o = v / nr;
                }
            }
            (out, norms)
        };
        let (an, na) = normalize(self.value(a).data());
        let (bn, nb) = normalize(self.value(b).data());
        let mut out = vec![0.0; n * m];
        gemm(
            1.0,
            MatRef::row_major(&an, n, d),
            MatRef::row_major(&bn, m, d).t(),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            "cosine-similarity",
            Tensor::new(vec![n, m], out)?,
            Op::Cosine { a, b, an, bn, na, nb },
            rg,
        )
    }

    /// 2-D convolution: `x[B, C, H, W]`, `w[O, C, kh, kw]`, optional
    /// per-channel `bias[O]`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Self::shape_err("conv2d", &sx, &sw));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Self::shape_err("conv2d", &sx, &sw));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [sw[0]] {
                return Err(Self::shape_err("conv2d", &sw, self.shape(bv)));
            }
        }
        let geom = ConvGeom {
            in_ch: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let out_ch = sw[0];
        let (bs, ncol, nrow) = (sx[0], geom.col_cols(), geom.col_rows());
        let plane = sx[1] * sx[2] * sx[3];
        let mut cols = vec![0.0; nrow * ncol];
        let mut out = vec![0.0; bs * out_ch * ncol];
        let xd = self.value(x).data();
        let wm = MatRef::row_major(self.value(w).data(), out_ch, nrow);
        let bd = bias.map(|b| self.value(b).data());
        for bi in 0..bs {
            im2col(&xd[bi * plane..(bi + 1) * plane], &geom, &mut cols);
            let dst = &mut out[bi * out_ch * ncol..(bi + 1) * out_ch * ncol];
            if let Some(bd) = bd {
                for o in 0..out_ch {
                    dst[o * ncol..(o + 1) * ncol].fill(bd[o]);
                }
            }
            gemm(
                1.0,
                wm,
                MatRef::row_major(&cols, nrow, ncol),
                if bd.is_some() { 1.0 } else { 0.0 },
                dst,
            );
        }
        let mut ins = vec![x, w];
        ins.extend(bias);
        let rg = self.rg(&ins);
        self.push(
            "conv2d",
            Tensor::new(vec![bs, out_ch, geom.out_h(), geom.out_w()], out)?,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                out_ch,
            },
            rg,
        )
    }

    /// 1x1 convolution with weight `w[O, C]`: a per-location channel map.
    pub fn conv1x1(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(Self::shape_err("conv1x1", self.shape(x), &sw));
        }
        let w4 = self.reshape(w, &[sw[0], sw[1], 1, 1])?;
        self.conv2d(x, w4, bias, 1, 0)
    }

    /// Nearest-neighbour upsampling of `x[B, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 || factor == 0 {
            return Err(Self::shape_err("upsample-nearest", &sa, &[factor]));
        }
        let (h, w) = (sa[2], sa[3]);
        let (oh, ow) = (h * factor, w * factor);
        let x = self.value(a).data();
        let planes = sa[0] * sa[1];
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = x[(p * h + i / factor) * w + j / factor];
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            "upsample-nearest",
            Tensor::new(vec![sa[0], sa[1], oh, ow], out)?,
            Op::Upsample { a, factor },
            rg,
        )
    }

    /// Selects sub-tensors along the leading axis: `out[i] = a[ids[i]]`.
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || ids.is_empty() {
            return Err(Self::shape_err("gather-rows", &sa, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= sa[0]) {
            return Err(Error::InvalidArgument(format!(
                "gather-rows: index {bad} out of range for leading axis {}",
                sa[0]
            )));
        }
        let row: usize = sa[1..].iter().product();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(ids.len() * row);
        for &i in ids {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut out_shape = sa.clone();
        out_shape[0] = ids.len();
        let rg = self.rg(&[a]);
        self.push(
            "gather-rows",
            Tensor::new(out_shape, out)?,
            Op::Gather { a, ids: ids.to_vec() },
            rg,
        )
    }

    /// Concatenates tensors along `axis`; other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Self::shape_err("concat", &s0, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let compatible =
                sp.len() == s0.len() && sp.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Self::shape_err("concat", &s0, sp));
            }
            total += sp[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let mut out_shape = s0;
        out_shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            "concat",
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Fused multi-head scaled dot-product attention. `q, k, v` are
    /// `[B, T, h]` with `h` split into `heads` contiguous groups; the output
    /// is `softmax(scale * q k^T) v` per head, merged back to `[B, T, h]`.
    /// The weights are kept on the node and exposed through
    /// [`Tape::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sq != sk || sq != sv || heads == 0 || sq[2] % heads != 0 {
            return Err(Self::shape_err("attention", sq, if sq == sk { sv } else { sk }));
        }
        let (bs, t, h) = (sq[0], sq[1], sq[2]);
        let dh = h / heads;
        let mut probs = vec![0.0; bs * heads * t * t];
        let mut out = vec![0.0; bs * t * h];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for (i, p) in probs.chunks_exact_mut(t * t).enumerate() {
            let off = (i / heads) * t * h + (i % heads) * dh;
            gemm(
                scale,
                MatRef::strided(&qd[off..], t, dh, h),
                MatRef::strided(&kd[off..], t, dh, h).t(),
                0.0,
                p,
            );
            softmax_rows(p, t);
            gemm_into(
                1.0,
                MatRef::row_major(p, t, t),
                MatRef::strided(&vd[off..], t, dh, h),
                0.0,
                &mut out[off..],
                h,
            );
        }
        let probs = Tensor::new(vec![bs * heads, t, t], probs)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            Tensor::new(vec![bs, t, h], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            rg,
        )
    }

    /// `x[..., k] @ w[k, n] + b[n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] || sb != [sw[1]] {
            return Err(Self::shape_err("affine", sx, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = numel(sx) / k;
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(
            1.0,
            MatRef::row_major(self.value(x).data(), m, k),
            MatRef::row_major(self.value(w).data(), k, n),
            1.0,
            &mut out,
        );
        let rg = self.rg(&[x, w, b]);
        self.push("affine", Tensor::new(out_shape, out)?, Op::Affine { x, w, b }, rg)
    }

    /// Attention weights `[B*heads, T, T]` of a node made by [`Tape::attention`].
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes.get(v.0)?.op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Backward("root is not on this tape".into()));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        backward::run(self, root)
    }
}

pub(crate) fn lse_masked(row: &[f64], mask: Option<&[bool]>) -> f64 {
    let keep = |l: usize| mask.is_none_or(|m| m[l]);
    let mx = (0..row.len())
        .filter(|&l| keep(l))
        .map(|l| row[l])
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..row.len()).filter(|&l| keep(l)).map(|l| fast_exp(row[l] - mx)).sum();
    mx + s.ln()
}
