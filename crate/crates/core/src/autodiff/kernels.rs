//! Low-level dense kernels used by the tape primitives.

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// `rows x cols` view with row stride `rs` and unit column stride.
    pub fn strided(data: &'a [f64], rows: usize, cols: usize, rs: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: rs as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span_ok(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows as isize - 1) * self.rs + (self.cols as isize - 1) * self.cs;
        last >= 0 && (last as usize) < self.data.len()
    }
}

/// `c = alpha * a @ b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    gemm_into(alpha, a, b, beta, c, b.cols);
}

/// [`gemm`] writing rows of `c` that lie `c_rs` elements apart.
pub(crate) fn gemm_into(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], c_rs: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(
        c_rs >= n && (m == 0 || c.len() >= (m - 1) * c_rs + n),
        "gemm output too small"
    );
    assert!(a.span_ok() && b.span_ok(), "gemm operand out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for row in 0..m {
            for v in &mut c[row * c_rs..row * c_rs + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: the spans of `a`, `b` and `c` were checked against their slices above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over `[channels, height, width]` planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one `[C, H, W]` plane into `[C*kh*kw, Ho*Wo]` columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = valid_range(ow, g.stride, kj, g.pad, g.w);
                for oi in 0..oh {
                    let out = &mut dst[oi * ow..(oi + 1) * ow];
                    let yi = oi * g.stride + ki;
                    if yi < g.pad || yi - g.pad >= g.h || lo >= hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + yi - g.pad) * g.w..(c * g.h + yi - g.pad + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (o, v) in out[lo..hi].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `o * stride + k - pad` lies
/// inside `0..w`.
fn valid_range(ow: usize, stride: usize, k: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if w + pad > k {
        (w + pad - k).div_ceil(stride).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[C, H, W]` plane.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oi in 0..oh {
                    let yi = (oi * g.stride + ki) as isize - g.pad as isize;
                    if yi < 0 || yi as usize >= g.h {
                        continue;
                    }
                    for oj in 0..ow {
                        let xj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if xj < 0 || xj as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + yi as usize) * g.w + xj as usize] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with shape `shape`) into `dst` with axes reordered so that
/// output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_into(src: &[f64], shape: &[usize], axes: &[usize], dst: &mut [f64]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    if rank == 0 {
        dst[0] = src[0];
        return;
    }
    // Innermost axis handled as a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for o in 0..outer {
        let out_off = o * inner;
        for t in 0..inner {
            dst[out_off + t] = src[base + t * inner_stride];
        }
        // advance the multi-index
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// `exp` accurate to a few ulp on [-708, 709], clamped outside that range.
/// Built from correctly rounded fused multiply-adds, so vectorised and
/// scalar evaluation agree bit for bit.
#[inline(always)]
pub(crate) fn fast_exp(x: f64) -> f64 {
    const MAGIC: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.clamp(-708.0, 709.0);
    let t = x.mul_add(std::f64::consts::LOG2_E, MAGIC);
    let k = t - MAGIC;
    let r = k.mul_add(-LN2_LO, k.mul_add(-LN2_HI, x));
    let mut p: f64 = 1.0 / 479001600.0;
    for c in [
        1.0 / 39916800.0,
        1.0 / 3628800.0,
        1.0 / 362880.0,
        1.0 / 40320.0,
        1.0 / 5040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p.mul_add(r, c);
    }
    let ki = (t.to_bits() as i64).wrapping_sub(MAGIC.to_bits() as i64);
    p * f64::from_bits((ki.wrapping_add(1023) << 52) as u64)
}

/// Four-lane reduction with a fixed association order.
#[inline(always)]
fn reduce4(xs: &[f64], init: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [init; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        for l in 0..4 {
            acc[l] = f(acc[l], c[l]);
        }
    }
    let mut r = f(f(acc[0], acc[1]), f(acc[2], acc[3]));
    for &v in chunks.remainder() {
        r = f(r, v);
    }
    r
}

#[inline(always)]
fn softmax_row_body(row: &mut [f64]) {
    let mx = reduce4(row, f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v = fast_exp(*v - mx);
    }
    let inv = 1.0 / reduce4(row, 0.0, |a, b| a + b);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq,avx512vl,avx2,fma")]
unsafe fn softmax_rows_avx512(data: &mut [f64], len: usize) {
    for row in data.chunks_mut(len) {
        softmax_row_body(row);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn softmax_rows_avx2(data: &mut [f64], len: usize) {
    for row in data.chunks_mut(len) {
        softmax_row_body(row);
    }
}

/// In-place max-stabilised softmax of consecutive rows of length `len`.
pub(crate) fn softmax_rows(data: &mut [f64], len: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("avx512dq") {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { softmax_rows_avx512(data, len) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { softmax_rows_avx2(data, len) };
        return;
    }
    for row in data.chunks_mut(len) {
        softmax_row_body(row);
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_std() {
        let mut worst: f64 = 0.0;
        for i in 0..200_001 {
            let x = -708.0 + 1417.0 * i as f64 / 200_000.0;
            worst = worst.max(((fast_exp(x) - x.exp()) / x.exp()).abs());
        }
        assert!(worst < 1e-15, "{worst:e}");
        assert_eq!(fast_exp(0.0), 1.0);
        assert!(fast_exp(-1e4) < 1e-300);
    }

    #[test]
    fn softmax_rows_match_scalar_formula() {
        let mut d: Vec<f64> = (0..30).map(|v| (v as f64 * 0.7).sin() * 5.0).collect();
        let src = d.clone();
        softmax_rows(&mut d, 10);
        for (r, row) in src.chunks(10).enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for (l, v) in row.iter().enumerate() {
                assert!((d[r * 10 + l] - (v - mx).exp() / z).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gemm_matches_loops_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(
            1.0,
            MatRef::row_major(&a, 2, 3),
            MatRef::row_major(&b, 3, 4),
            0.0,
            &mut c,
        );
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) @ a (2x3)
        let mut g = vec![0.0; 9];
        let av = MatRef::row_major(&a, 2, 3);
        gemm(1.0, av.t(), av, 0.0, &mut g);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum();
                assert_eq!(g[i * 3 + j], want);
            }
        }
    }

    #[test]
    fn permute_reverses_axes() {
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let mut dst = vec![0.0; 24];
        permute_into(&src, &[2, 3, 4], &[2, 0, 1], &mut dst);
        // out[k][i][j] = src[i][j][k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(dst[(k * 2 + i) * 3 + j], src[(i * 3 + j) * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            in_ch: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let n = g.col_rows() * g.col_cols();
        let y: Vec<f64> = (0..n).map(|v| (v as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; n];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn im2col_matches_pointwise_gather() {
        for (h, w, k, stride, pad) in geometries() {
            let g = ConvGeom {
                in_ch: 2,
                h,
                w,
                kh: k,
                kw: k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|v| v as f64 + 1.0).collect();
            let (oh, ow) = (g.out_h(), g.out_w());
            let mut cols = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&x, &g, &mut cols);
            for (r, row) in cols.chunks(oh * ow).enumerate() {
                let (c, ki, kj) = (r / (k * k), r / k % k, r % k);
                for (i, &v) in row.iter().enumerate() {
                    let yi = (i / ow * stride + ki) as isize - pad as isize;
                    let xj = (i % ow * stride + kj) as isize - pad as isize;
                    let inside = (0..h as isize).contains(&yi) && (0..w as isize).contains(&xj);
                    let want = if inside {
                        x[(c * h + yi as usize) * w + xj as usize]
                    } else {
                        0.0
                    };
                    assert_eq!(v, want, "h {h} w {w} k {k} stride {stride} pad {pad} row {r} col {i}");
                }
            }
        }
    }

    fn geometries() -> Vec<(usize, usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for (h, w) in [(1, 1), (4, 5), (7, 3)] {
            for k in 1..=3 {
                for stride in 1..=3 {
                    for pad in 0..=2 {
                        if h + 2 * pad >= k && w + 2 * pad >= k {
                            out.push((h, w, k, stride, pad));
                        }
                    }
                }
            }
        }
        out
    }
}
