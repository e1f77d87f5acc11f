//! Explicit-loop reference computations used by unit tests.

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::BlockParams;

pub type Rows = Vec<Vec<f64>>;
pub type Grid = Vec<Vec<Vec<f64>>>;

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    (0..x.len()).map(|i| (x[i] - mu) * rstd * g[i] + b[i]).collect()
}

pub fn affine(x: &Rows, w: &Tensor, b: &Tensor) -> Rows {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut acc = b.data()[j];
                    for i in 0..k {
                        acc += row[i] * w.at(&[i, j]);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// One pre-norm transformer block over a single sequence.
pub fn block(x: &Rows, store: &ParamStore, p: &BlockParams, heads: usize) -> Rows {
    let t = x.len();
    let h = x[0].len();
    let dh = h / heads;
    let n1: Rows = x
        .iter()
        .map(|r| layer_norm(r, store.get(p.ln1_g).data(), store.get(p.ln1_b).data()))
        .collect();
    let q = affine(&n1, store.get(p.wq), store.get(p.bq));
    let k = affine(&n1, store.get(p.wk), store.get(p.bk));
    let v = affine(&n1, store.get(p.wv), store.get(p.bv));
    let mut ctx = vec![vec![0.0; h]; t];
    for hd in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i][hd * dh + c] * k[j][hd * dh + c];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let a = softmax(&scores);
            for j in 0..t {
                for c in 0..dh {
                    ctx[i][hd * dh + c] += a[j] * v[j][hd * dh + c];
                }
            }
        }
    }
    let o = affine(&ctx, store.get(p.wo), store.get(p.bo));
    let x1: Rows = (0..t).map(|i| (0..h).map(|c| x[i][c] + o[i][c]).collect()).collect();
    let n2: Rows = x1
        .iter()
        .map(|r| layer_norm(r, store.get(p.ln2_g).data(), store.get(p.ln2_b).data()))
        .collect();
    let hid: Rows = affine(&n2, store.get(p.w1), store.get(p.b1))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let m = affine(&hid, store.get(p.w2), store.get(p.b2));
    (0..t).map(|i| (0..h).map(|c| x1[i][c] + m[i][c]).collect()).collect()
}

/// Zero-padded convolution of `x[C][H][W]` with `w[O, C, kh, kw]`.
pub fn conv2d(x: &Grid, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Grid {
    let (o, c, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wd) = (x[0].len() as isize, x[0][0].len() as isize);
    let oh = ((h + 2 * pad as isize - kh as isize) / stride as isize + 1) as usize;
    let ow = ((wd + 2 * pad as isize - kw as isize) / stride as isize + 1) as usize;
    let mut out = vec![vec![vec![0.0; ow]; oh]; o];
    for oc in 0..o {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                for ic in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xo * stride + dx) as isize - pad as isize;
                            if iy >= 0 && iy < h && ix >= 0 && ix < wd {
                                acc += x[ic][iy as usize][ix as usize] * w.at(&[oc, ic, dy, dx]);
                            }
                        }
                    }
                }
                out[oc][y][xo] = acc;
            }
        }
    }
    out
}

pub fn relu_grid(x: Grid) -> Grid {
    x.into_iter()
        .map(|c| {
            c.into_iter()
                .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
                .collect()
        })
        .collect()
}

pub fn upsample(x: &Grid, f: usize) -> Grid {
    x.iter()
        .map(|c| {
            (0..c.len() * f)
                .map(|y| (0..c[0].len() * f).map(|xx| c[y / f][xx / f]).collect())
                .collect()
        })
        .collect()
}

/// `exp(a) / sum exp` over the channel axis at each location.
pub fn channel_softmax(x: &Grid) -> Grid {
    let (n, h, w) = (x.len(), x[0].len(), x[0][0].len());
    let mut out = vec![vec![vec![0.0; w]; h]; n];
    for y in 0..h {
        for xx in 0..w {
            let s = softmax(&(0..n).map(|j| x[j][y][xx]).collect::<Vec<_>>());
            for j in 0..n {
                out[j][y][xx] = s[j];
            }
        }
    }
    out
}
