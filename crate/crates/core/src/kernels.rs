//! Numeric kernels behind the graph ops: GEMM, convolutions, normalization,
//! pooling, interpolation and attention. All buffers are contiguous `f64`
//! slices; batch loops live here so the graph stays a thin bookkeeping layer.

/// Strided matrix view description for [`gemm`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Row-major storage of the transpose: element (i, j) lives at `j * rows + i`.
    pub const fn col_major(rows: usize) -> Self {
        Layout {
            rs: 1,
            cs: rows as isize,
        }
    }
}

fn extent(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * l.rs + (cols - 1) as isize * l.cs) as usize + 1
}

/// `C = alpha * A(m×k) * B(k×n) + beta * C(m×n)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    assert!(a.len() >= extent(m, k, la), "gemm: A buffer too small");
    assert!(b.len() >= extent(k, n, lb), "gemm: B buffer too small");
    assert!(c.len() >= extent(m, n, lc), "gemm: C buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access within the slices,
    // and `c` is an exclusive borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

/// Geometry of a 2-d convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *o = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Dense convolution. `x`: N×C_in×H×W, `w`: C_out×C_in×k×k, `b`: C_out.
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    b: Option<&[f64]>,
) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.col_rows();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * p;
    let mut out = vec![0.0; n * out_per];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * p]
    };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let rhs: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let os = &mut out[s * out_per..(s + 1) * out_per];
        if let Some(b) = b {
            for (co, chunk) in os.chunks_mut(p).enumerate() {
                chunk.fill(b[co]);
            }
        }
        gemm(
            g.c_out,
            kk,
            p,
            1.0,
            w,
            Layout::row_major(kk),
            rhs,
            Layout::row_major(p),
            if b.is_some() { 1.0 } else { 0.0 },
            os,
            Layout::row_major(p),
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> ConvGrads {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.col_rows();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * p;
    let mut dx = if need_dx {
        vec![0.0; n * in_per]
    } else {
        Vec::new()
    };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * p]
    };
    let mut dcols = if need_dx && !g.is_pointwise() {
        vec![0.0; kk * p]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let ds = &dout[s * out_per..(s + 1) * out_per];
        for (co, chunk) in ds.chunks(p).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        let rhs: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        // dW += dOut · colsᵀ
        gemm(
            g.c_out,
            p,
            kk,
            1.0,
            ds,
            Layout::row_major(p),
            rhs,
            Layout::col_major(p),
            1.0,
            &mut dw,
            Layout::row_major(kk),
        );
        if need_dx {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                gemm(
                    kk,
                    g.c_out,
                    p,
                    1.0,
                    w,
                    Layout::col_major(kk),
                    ds,
                    Layout::row_major(p),
                    0.0,
                    dxs,
                    Layout::row_major(p),
                );
            } else {
                gemm(
                    kk,
                    g.c_out,
                    p,
                    1.0,
                    w,
                    Layout::col_major(kk),
                    ds,
                    Layout::row_major(p),
                    0.0,
                    &mut dcols,
                    Layout::row_major(p),
                );
                col2im(&dcols, g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Depth-wise convolution: one k×k filter per channel (`w`: C×1×k×k).
pub(crate) fn depthwise_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    b: Option<&[f64]>,
) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let mut out = vec![0.0; n * g.c_in * ho * wo];
    for s in 0..n {
        for c in 0..g.c_in {
            let plane = &x[(s * g.c_in + c) * g.h * g.w..(s * g.c_in + c + 1) * g.h * g.w];
            let filt = &w[c * k * k..(c + 1) * k * k];
            let dst = &mut out[(s * g.c_in + c) * ho * wo..(s * g.c_in + c + 1) * ho * wo];
            let bias = b.map_or(0.0, |b| b[c]);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias;
                    for ki in 0..k {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for kj in 0..k {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                acc += filt[ki * k + kj] * row[iw as usize];
                            }
                        }
                    }
                    dst[oh * wo + ow] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    dout: &[f64],
) -> ConvGrads {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_in];
    for s in 0..n {
        for c in 0..g.c_in {
            let base = (s * g.c_in + c) * g.h * g.w;
            let plane = &x[base..base + g.h * g.w];
            let dplane = &mut dx[base..base + g.h * g.w];
            let filt = &w[c * k * k..(c + 1) * k * k];
            let dfilt = &mut dw[c * k * k..(c + 1) * k * k];
            let ds = &dout[(s * g.c_in + c) * ho * wo..(s * g.c_in + c + 1) * ho * wo];
            db[c] += ds.iter().sum::<f64>();
            for oh in 0..ho {
                for ow in 0..wo {
                    let go = ds[oh * wo + ow];
                    if go == 0.0 {
                        continue;
                    }
                    for ki in 0..k {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for kj in 0..k {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                let idx = ih * g.w + iw as usize;
                                dfilt[ki * k + kj] += go * plane[idx];
                                dplane[idx] += go * filt[ki * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-channel batch statistics (mean, biased variance) over N×H×W.
pub(crate) fn channel_stats(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for smp in 0..n {
            s += x[(smp * c + ch) * hw..(smp * c + ch + 1) * hw]
                .iter()
                .sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for smp in 0..n {
            for &val in &x[(smp * c + ch) * hw..(smp * c + ch + 1) * hw] {
                v += (val - mu) * (val - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_normalize(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            let a = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - a * mean[ch];
            for (o, &v) in out[range.clone()].iter_mut().zip(&x[range]) {
                *o = a * v + shift;
            }
        }
    }
    out
}

/// Gradients of batch normalization. With `batch_stats` the mean and variance
/// are functions of `x`; otherwise they are constants (inference statistics).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dout: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for s in 0..n {
            let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            for (&dy, &v) in dout[range.clone()].iter().zip(&x[range]) {
                sum_dy += dy;
                sum_dy_xhat += dy * (v - mu) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let gi = gamma[ch] * is;
        for s in 0..n {
            let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            for ((d, &dy), &v) in dx[range.clone()]
                .iter_mut()
                .zip(&dout[range.clone()])
                .zip(&x[range])
            {
                *d = if batch_stats {
                    let xhat = (v - mu) * is;
                    gi * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    gi * dy
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Source index and weights for one output coordinate of half-pixel bilinear
/// resampling (sampling at pixel centres, clamped at the borders).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

pub(crate) fn bilinear_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (r, ry) in rows.iter().enumerate() {
            let top = &src[ry.i0 * w..(ry.i0 + 1) * w];
            let bot = &src[ry.i1 * w..(ry.i1 + 1) * w];
            for (c, cx) in cols.iter().enumerate() {
                let t = cx.w0 * top[cx.i0] + cx.w1 * top[cx.i1];
                let b = cx.w0 * bot[cx.i0] + cx.w1 * bot[cx.i1];
                dst[r * ow + c] = ry.w0 * t + ry.w1 * b;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    dout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (r, ry) in rows.iter().enumerate() {
            for (c, cx) in cols.iter().enumerate() {
                let g = src[r * ow + c];
                dst[ry.i0 * w + cx.i0] += ry.w0 * cx.w0 * g;
                dst[ry.i0 * w + cx.i1] += ry.w0 * cx.w1 * g;
                dst[ry.i1 * w + cx.i0] += ry.w1 * cx.w0 * g;
                dst[ry.i1 * w + cx.i1] += ry.w1 * cx.w1 * g;
            }
        }
    }
    dx
}

/// k×k max pooling with stride and implicit −∞ padding. Returns the output
/// and, per output element, the flat in-plane index of the selected input.
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<u32>) {
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for r in 0..oh {
            for c in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ki in 0..kernel {
                    let ih = (r * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let iw = (c * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = ih as usize * w + iw as usize;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(p * oh + r) * ow + c] = best;
                arg[(p * oh + r) * ow + c] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

/// Non-overlapping k×k average pooling; `h` and `w` must be multiples of `k`.
pub(crate) fn avg_pool_forward(x: &[f64], planes: usize, (h, w): (usize, usize), k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                out[(p * oh + i / k) * ow + j / k] += src[i * w + j] * norm;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dout: &[f64], planes: usize, (h, w): (usize, usize), k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = dout[(p * oh + i / k) * ow + j / k] * norm;
            }
        }
    }
    dx
}

/// Row-wise numerically stable softmax, in place.
pub(crate) fn softmax_rows(scores: &mut [f64], cols: usize) {
    for row in scores.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Scaled dot-product attention on strided token matrices.
///
/// `q` is Nq×d, `k` and `v` are Nk×d, each described by a [`Layout`]. Writes
/// `Z = softmax(Q Kᵀ / √d) V` into `z` (layout `lz`) and returns the Nq×Nk
/// attention weights row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    nq: usize,
    nk: usize,
    d: usize,
    q: &[f64],
    lq: Layout,
    k: &[f64],
    lk: Layout,
    v: &[f64],
    lv: Layout,
    z: &mut [f64],
    lz: Layout,
) -> Vec<f64> {
    let mut probs = vec![0.0; nq * nk];
    let scale = 1.0 / (d as f64).sqrt();
    // Kᵀ as a d×Nk view of k.
    let lkt = Layout {
        rs: lk.cs,
        cs: lk.rs,
    };
    gemm(nq, d, nk, scale, q, lq, k, lkt, 0.0, &mut probs, Layout::row_major(nk));
    softmax_rows(&mut probs, nk);
    gemm(nq, nk, d, 1.0, &probs, Layout::row_major(nk), v, lv, 0.0, z, lz);
    probs
}

/// Backward of [`attention_forward`]; accumulates into `dq`, `dk`, `dv`,
/// which share the layouts of `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    nq: usize,
    nk: usize,
    d: usize,
    q: &[f64],
    lq: Layout,
    k: &[f64],
    lk: Layout,
    v: &[f64],
    lv: Layout,
    probs: &[f64],
    dz: &[f64],
    lz: Layout,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let scale = 1.0 / (d as f64).sqrt();
    // dA = dZ · Vᵀ
    let mut ds = vec![0.0; nq * nk];
    let lvt = Layout {
        rs: lv.cs,
        cs: lv.rs,
    };
    gemm(nq, d, nk, 1.0, dz, lz, v, lvt, 0.0, &mut ds, Layout::row_major(nk));
    // dV += Aᵀ · dZ
    gemm(nk, nq, d, 1.0, probs, Layout::col_major(nk), dz, lz, 1.0, dv, lv);
    // dS = A ⊙ (dA − rowsum(dA ⊙ A))
    for (drow, prow) in ds.chunks_mut(nk).zip(probs.chunks(nk)) {
        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
        for (x, &p) in drow.iter_mut().zip(prow) {
            *x = p * (*x - dot);
        }
    }
    // dQ += dS · K / √d ; dK += dSᵀ · Q / √d
    gemm(nq, nk, d, scale, &ds, Layout::row_major(nk), k, lk, 1.0, dq, lq);
    gemm(nk, nq, d, scale, &ds, Layout::col_major(nk), q, lq, 1.0, dk, lk);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
