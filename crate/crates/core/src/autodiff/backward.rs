use std::collections::{BTreeMap, HashMap};

use super::kernels::{axis_split, col2im, fast_exp, gemm, gemm_into, im2col, permute_into, MatRef};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter loaded on the tape (zeros when the root
    /// does not depend on it). `None` when the parameter was never loaded
    /// or was not trainable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    /// Gradient of a `requires_grad` leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    #[cfg(test)]
    pub(crate) fn set_param(&mut self, id: ParamId, g: Tensor) {
        self.params.insert(id, g);
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

pub(super) fn run(tape: &Tape, root: Var) -> Result<Gradients> {
    let nodes = tape.nodes();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
    if nodes[root.0].requires_grad {
        grads[root.0] = Some(vec![1.0]);
    }
    for idx in (0..=root.0).rev() {
        let node = &nodes[idx];
        if !node.requires_grad {
            continue;
        }
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(g) = grads[idx].take() else { continue };
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                let sb = shp(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = val(*a).len() / k;
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        1.0,
                        MatRef::row_major(&g, m, n),
                        MatRef::row_major(val(*b), k, n).t(),
                        0.0,
                        &mut da,
                    );
                    accumulate(&mut grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        1.0,
                        MatRef::row_major(val(*a), m, k).t(),
                        MatRef::row_major(&g, m, n),
                        0.0,
                        &mut db,
                    );
                    accumulate(&mut grads, *b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = shp(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (val(*a), val(*b));
                if rg(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        let gm = MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bm = if *trans_b {
                            // out = A B^T, dA = G B with B [n, k]
                            MatRef::row_major(&bd[i * n * k..(i + 1) * n * k], n, k)
                        } else {
                            // dA = G B^T with B [k, n]
                            MatRef::row_major(&bd[i * k * n..(i + 1) * k * n], k, n).t()
                        };
                        gemm(1.0, gm, bm, 0.0, &mut da[i * m * k..(i + 1) * m * k]);
                    }
                    accumulate(&mut grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let gm = MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                        let am = MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k);
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB [n, k] = G^T A
                            gemm(1.0, gm.t(), am, 0.0, dst);
                        } else {
                            // dB [k, n] = A^T G
                            gemm(1.0, am.t(), gm, 0.0, dst);
                        }
                    }
                    accumulate(&mut grads, *b, db);
                }
            }
            Op::Permute { a, axes } => {
                if rg(*a) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let mut da = vec![0.0; g.len()];
                    permute_into(&g, node.value.shape(), &inv, &mut da);
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::Reshape { a } => {
                if rg(*a) {
                    accumulate(&mut grads, *a, g);
                }
            }
            Op::Add { a, b } => {
                if rg(*b) {
                    let nb = val(*b).len();
                    let mut db = vec![0.0; nb];
                    for chunk in g.chunks(nb) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                }
                if rg(*a) {
                    accumulate(&mut grads, *a, g);
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let nb = bd.len();
                if rg(*b) {
                    let mut db = vec![0.0; nb];
                    for (gc, ac) in g.chunks(nb).zip(ad.chunks(nb)) {
                        for ((d, gv), av) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gv * av;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                }
                if rg(*a) {
                    let mut da = g;
                    for chunk in da.chunks_exact_mut(nb) {
                        for (d, y) in chunk.iter_mut().zip(bd) {
                            *d *= y;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::Scale { a, c } => {
                if rg(*a) {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddScalar { a } => {
                if rg(*a) {
                    accumulate(&mut grads, *a, g);
                }
            }
            Op::Exp { a } => {
                if rg(*a) {
                    accumulate(&mut grads, *a, g.iter().zip(out).map(|(gv, y)| gv * y).collect());
                }
            }
            Op::Ln { a } => {
                if rg(*a) {
                    let da = g.iter().zip(val(*a)).map(|(gv, x)| gv / x).collect();
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::Relu { a } => {
                if rg(*a) {
                    let da = g
                        .iter()
                        .zip(val(*a))
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::Softmax { a, axis } => {
                if rg(*a) {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let mut da = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                            for l in 0..len {
                                da[at(l)] = out[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::LogSoftmax { a } => {
                if rg(*a) {
                    let len = *node.value.shape().last().unwrap();
                    let mut da = vec![0.0; g.len()];
                    for ((gr, yr), dr) in g.chunks(len).zip(out.chunks(len)).zip(da.chunks_mut(len)) {
                        let s: f64 = gr.iter().sum();
                        for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = gv - y.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::LogSumExp { a, mask } => {
                if rg(*a) {
                    let x = val(*a);
                    let len = *shp(*a).last().unwrap();
                    let mut da = vec![0.0; x.len()];
                    for r in 0..g.len() {
                        for l in 0..len {
                            let i = r * len + l;
                            if mask.as_ref().is_none_or(|m| m[i]) {
                                da[i] = g[r] * fast_exp(x[i] - out[r]);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let s = shp(*q);
                let (t, h) = (s[1], s[2]);
                let dh = h / heads;
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; g.len()];
                let mut dk = vec![0.0; g.len()];
                let mut dv = vec![0.0; g.len()];
                let mut ds = vec![0.0; t * t];
                for (i, p) in probs.data().chunks_exact(t * t).enumerate() {
                    let off = (i / heads) * t * h + (i % heads) * dh;
                    let pm = MatRef::row_major(p, t, t);
                    gemm_into(
                        1.0,
                        pm.t(),
                        MatRef::strided(&g[off..], t, dh, h),
                        0.0,
                        &mut dv[off..],
                        h,
                    );
                    gemm(
                        1.0,
                        MatRef::strided(&g[off..], t, dh, h),
                        MatRef::strided(&vd[off..], t, dh, h).t(),
                        0.0,
                        &mut ds,
                    );
                    for (dr, pr) in ds.chunks_mut(t).zip(p.chunks(t)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (x, pv) in dr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot);
                        }
                    }
                    let dsm = MatRef::row_major(&ds, t, t);
                    gemm_into(
                        *scale,
                        dsm,
                        MatRef::strided(&kd[off..], t, dh, h),
                        0.0,
                        &mut dq[off..],
                        h,
                    );
                    gemm_into(
                        *scale,
                        dsm.t(),
                        MatRef::strided(&qd[off..], t, dh, h),
                        0.0,
                        &mut dk[off..],
                        h,
                    );
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if rg(var) {
                        accumulate(&mut grads, var, grad);
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let sw = shp(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = val(*x).len() / k;
                if rg(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(
                        1.0,
                        MatRef::row_major(&g, m, n),
                        MatRef::row_major(val(*w), k, n).t(),
                        0.0,
                        &mut dx,
                    );
                    accumulate(&mut grads, *x, dx);
                }
                if rg(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(
                        1.0,
                        MatRef::row_major(val(*x), m, k).t(),
                        MatRef::row_major(&g, m, n),
                        0.0,
                        &mut dw,
                    );
                    accumulate(&mut grads, *w, dw);
                }
                if rg(*b) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *shp(*x).last().unwrap();
                let gm = val(*gamma);
                if rg(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(&mut grads, *gamma, dg);
                }
                if rg(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for (a, b) in db.iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *beta, db);
                }
                if rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((gr, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dr[j] = rstd[r] * (gr[j] * gm[j] - m1 - hr[j] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
            Op::MeanAxis { a, axis } | Op::SumAxis { a, axis } => {
                if rg(*a) {
                    let (outer, len, inner) = axis_split(shp(*a), *axis);
                    let f = if matches!(node.op, Op::MeanAxis { .. }) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut da = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = gv * f;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::Sum { a } => {
                if rg(*a) {
                    accumulate(&mut grads, *a, vec![g[0]; val(*a).len()]);
                }
            }
            Op::L2Norm { a } => {
                if rg(*a) {
                    let x = val(*a);
                    let d = *shp(*a).last().unwrap();
                    let mut da = vec![0.0; x.len()];
                    for (r, (xr, dr)) in x.chunks(d).zip(da.chunks_mut(d)).enumerate() {
                        if out[r] > 0.0 {
                            for (dv, xv) in dr.iter_mut().zip(xr) {
                                *dv = g[r] * xv / out[r];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::L2Normalize { a, norms } => {
                if rg(*a) {
                    let d = *shp(*a).last().unwrap();
                    let mut da = vec![0.0; g.len()];
                    for (r, ((gr, yr), dr)) in g.chunks(d).zip(out.chunks(d)).zip(da.chunks_mut(d)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = (gv - yv * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::Cosine { a, b, an, bn, na, nb } => {
                let (n, m) = (na.len(), nb.len());
                let d = *shp(*a).last().unwrap();
                let back = |dh: &[f64], unit: &[f64], norms: &[f64]| -> Vec<f64> {
                    let mut dx = vec![0.0; dh.len()];
                    for (r, ((dr, ur), xr)) in dh.chunks(d).zip(unit.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let dot: f64 = dr.iter().zip(ur).map(|(p, q)| p * q).sum();
                        for ((x, dv), uv) in xr.iter_mut().zip(dr).zip(ur) {
                            *x = (dv - uv * dot) / norms[r];
                        }
                    }
                    dx
                };
                let gm = MatRef::row_major(&g, n, m);
                if rg(*a) {
                    let mut dan = vec![0.0; n * d];
                    gemm(1.0, gm, MatRef::row_major(bn, m, d), 0.0, &mut dan);
                    accumulate(&mut grads, *a, back(&dan, an, na));
                }
                if rg(*b) {
                    let mut dbn = vec![0.0; m * d];
                    gemm(1.0, gm.t(), MatRef::row_major(an, n, d), 0.0, &mut dbn);
                    accumulate(&mut grads, *b, back(&dbn, bn, nb));
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                out_ch,
            } => {
                let bs = shp(*x)[0];
                let (nrow, ncol) = (geom.col_rows(), geom.col_cols());
                let plane = geom.in_ch * geom.h * geom.w;
                let xd = val(*x);
                let wd = val(*w);
                let mut cols = vec![0.0; nrow * ncol];
                let mut dw = rg(*w).then(|| vec![0.0; out_ch * nrow]);
                let mut dx = rg(*x).then(|| vec![0.0; bs * plane]);
                let mut dcols = vec![0.0; if dx.is_some() { nrow * ncol } else { 0 }];
                for bi in 0..bs {
                    let gb = MatRef::row_major(&g[bi * out_ch * ncol..(bi + 1) * out_ch * ncol], *out_ch, ncol);
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xd[bi * plane..(bi + 1) * plane], geom, &mut cols);
                        gemm(1.0, gb, MatRef::row_major(&cols, nrow, ncol).t(), 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(1.0, MatRef::row_major(wd, *out_ch, nrow).t(), gb, 0.0, &mut dcols);
                        col2im(&dcols, geom, &mut dx[bi * plane..(bi + 1) * plane]);
                    }
                }
                if let Some(bv) = bias.filter(|&bv| rg(bv)) {
                    let mut db = vec![0.0; *out_ch];
                    for (i, chunk) in g.chunks(ncol).enumerate() {
                        db[i % out_ch] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut grads, bv, db);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads, *w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads, *x, dx);
                }
            }
            Op::Upsample { a, factor } => {
                if rg(*a) {
                    let sa = shp(*a);
                    let (h, w) = (sa[2], sa[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    let planes = sa[0] * sa[1];
                    let mut da = vec![0.0; planes * h * w];
                    for p in 0..planes {
                        for i in 0..oh {
                            for j in 0..ow {
                                da[(p * h + i / factor) * w + j / factor] += g[(p * oh + i) * ow + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::Gather { a, ids } => {
                if rg(*a) {
                    let n = val(*a).len();
                    let row = g.len() / ids.len();
                    let mut da = vec![0.0; n];
                    for (k, &i) in ids.iter().enumerate() {
                        for (d, gv) in da[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shp(p)[*axis];
                    if rg(p) {
                        let mut dp = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dp[o * len * inner..(o + 1) * len * inner].copy_from_slice(&g[src..src + len * inner]);
                        }
                        accumulate(&mut grads, p, dp);
                    }
                    offset += len;
                }
            }
        }
    }

    let mut result = Gradients::default();
    for (idx, node) in nodes.iter().enumerate() {
        if matches!(node.op, Op::Leaf) && node.requires_grad {
            let g = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            let t = Tensor::new(node.value.shape().to_vec(), g)?;
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            result.leaves.insert(idx, t);
        }
    }
    for (&id, &v) in tape.param_vars() {
        if let Some(t) = result.leaves.get(&v.0) {
            result.params.insert(id, t.clone());
        }
    }
    Ok(result)
}
