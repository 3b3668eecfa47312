//! Raw forward/backward kernels on flat `f32` buffers.
//!
//! All kernels are single-threaded, so results are bit-reproducible for a
//! given build and CPU.

/// `c = op(a) * op(b) + beta * c` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Reductions at least this long use [`dot`] instead of `gemm`, which is
/// slow when both output dimensions are small.
const LONG_REDUCTION: usize = 1024;

/// Dot product with sixteen interleaved partial sums.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..16 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + k - pad` lies
/// inside `0..w`.
fn valid_range(k: usize, stride: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if w + pad > k { (w + pad - k - 1) / stride + 1 } else { 0 };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let opix = g.oh * g.ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * opix..(row + 1) * opix];
                let (lo, hi) = valid_range(kx, g.stride, g.pad, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let opix = g.oh * g.ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * opix..(row + 1) * opix];
                let (lo, hi) = valid_range(kx, g.stride, g.pad, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + (hi - lo)].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. `x`: `[batch, cin, h, w]`, `weight`: `[cout, cin, kh, kw]`.
pub fn conv2d_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let opix = g.oh * g.ow;
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * opix;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.col_rows() * opix] };
    for n in 0..g.batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let os = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (co, chunk) in os.chunks_mut(opix).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let rhs = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(g.cout, g.col_rows(), opix, weight, false, rhs, false, 1.0, os);
    }
    out
}

/// Accumulates gradients into whichever of `dx`, `dw`, `db` are given.
pub fn conv2d_backward(
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    mut db: Option<&mut [f32]>,
) {
    let opix = g.oh * g.ow;
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * opix;
    let rows = g.col_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * opix] };
    let mut dcols = vec![0.0; if g.is_pointwise() { 0 } else { rows * opix }];
    for n in 0..g.batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let ds = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in ds.chunks(opix).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let rhs = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            if opix >= LONG_REDUCTION {
                for (co, dw_row) in dw.chunks_mut(rows).enumerate() {
                    let d = &ds[co * opix..(co + 1) * opix];
                    for (r, acc) in dw_row.iter_mut().enumerate() {
                        *acc += dot(d, &rhs[r * opix..(r + 1) * opix]);
                    }
                }
            } else {
                gemm(g.cout, opix, rows, ds, false, rhs, true, 1.0, dw);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(rows, g.cout, opix, weight, true, ds, false, 1.0, dxs);
            } else {
                gemm(rows, g.cout, opix, weight, true, ds, false, 0.0, &mut dcols);
                col2im(&dcols, g, dxs);
            }
        }
    }
}

/// 2x2 / stride-2 max pooling over `planes` planes of `h x w`. Returns the
/// pooled values and, per output, the flat input index of the winner (first
/// maximum in row-major window order).
pub fn max_pool2_forward(x: &[f32], planes: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

/// Per-axis bilinear taps for align-corners-false upsampling by `factor`:
/// `(i0, i1, weight of i1)` for each output coordinate.
pub fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    let scale = 1.0 / factor as f32;
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

pub fn upsample_forward(x: &[f32], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - lx) + r0[x1] * lx;
                let bot = r1[x0] * (1.0 - lx) + r1[x1] * lx;
                dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample_backward(
    dout: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    dx: &mut [f32],
) {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let gt = g * (1.0 - ly);
                let gb = g * ly;
                dst[y0 * w + x0] += gt * (1.0 - lx);
                dst[y0 * w + x1] += gt * lx;
                dst[y1 * w + x0] += gb * (1.0 - lx);
                dst[y1 * w + x1] += gb * lx;
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow or cancellation.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Per-pixel pieces of the binary cross-entropy of a logit whose
/// probability is clamped to `[eps, 1 - eps]`: `(ln p, ln(1 - p), inside)`.
/// The clamp is applied to the logit, which is equivalent and keeps full
/// precision where `p` is close to 0 or 1. `inside` is false where the clamp
/// is active.
#[inline]
pub fn bce_log_terms(x: f32, eps: f32) -> (f64, f64, bool) {
    let eps = eps as f64;
    let limit = ((1.0 - eps) / eps).ln();
    let x = x as f64;
    let xc = x.clamp(-limit, limit);
    (-softplus(-xc), -softplus(xc), x.abs() < limit)
}
