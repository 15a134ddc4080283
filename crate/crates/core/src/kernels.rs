//! Slice-level forward and backward kernels for the layer primitives.
//!
//! All image buffers are `[N, C, H, W]` row-major. Convolutions are lowered
//! to matrix products (im2col + sgemm); everything else is a direct loop.

/// Geometry of an `[N, C, H, W]` buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

/// Square convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span = |x: usize| {
            let padded = x + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        Some((span(h)?, span(w)?))
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the callers size every buffer from the same m/k/n and strides,
    // so all addressed elements lie inside the slices.
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

fn im2col(x: &[f32], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [f32]) {
    let k = g.kernel;
    let p = g.padding as isize;
    let s = g.stride as isize;
    let opix = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * opix..][..opix];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize - p;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [f32]) {
    let k = g.kernel;
    let p = g.padding as isize;
    let s = g.stride as isize;
    let opix = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * opix..][..opix];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. `weight` is `[C_out, C_in, k, k]`.
/// Returns the output and its spatial size.
pub fn conv2d_forward(
    x: &[f32],
    xd: Dims,
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = g.out_size(xd.h, xd.w).expect("caller validated the geometry");
    let opix = oh * ow;
    let co = g.out_channels;
    let r = g.patch();
    let mut y = vec![0.0f32; xd.n * co * opix];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; r * opix] };
    for n in 0..xd.n {
        let xn = &x[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
        let yn = &mut y[n * co * opix..(n + 1) * co * opix];
        if let Some(b) = bias {
            for (c, row) in yn.chunks_mut(opix).enumerate() {
                row.fill(b[c]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let b_mat: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, xd.c, xd.h, xd.w, g, oh, ow, &mut cols);
            &cols
        };
        gemm(co, r, opix, weight, r as isize, 1, b_mat, opix as isize, 1, beta, yn);
    }
    (y, oh, ow)
}

/// Convolution backward. Returns `(dx, dweight, dbias)`; `dx` is only
/// computed when `need_dx` is set.
pub fn conv2d_backward(
    x: &[f32],
    xd: Dims,
    weight: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let (oh, ow) = g.out_size(xd.h, xd.w).expect("caller validated the geometry");
    let opix = oh * ow;
    let co = g.out_channels;
    let r = g.patch();
    let mut dw = vec![0.0f32; co * r];
    let mut db = vec![0.0f32; co];
    let mut dx = need_dx.then(|| vec![0.0f32; x.len()]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; r * opix] };
    let mut dcols = if need_dx && !g.is_pointwise() { vec![0.0f32; r * opix] } else { Vec::new() };
    for n in 0..xd.n {
        let xn = &x[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
        let dyn_ = &dy[n * co * opix..(n + 1) * co * opix];
        for (c, row) in dyn_.chunks(opix).enumerate() {
            db[c] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        let b_mat: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, xd.c, xd.h, xd.w, g, oh, ow, &mut cols);
            &cols
        };
        // dW[co × r] += dY[co × P] · colsᵀ[P × r]
        gemm(co, opix, r, dyn_, opix as isize, 1, b_mat, 1, opix as isize, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
            // dcols[r × P] = Wᵀ[r × co] · dY[co × P]
            if g.is_pointwise() {
                gemm(r, co, opix, weight, 1, r as isize, dyn_, opix as isize, 1, 0.0, dxn);
            } else {
                gemm(r, co, opix, weight, 1, r as isize, dyn_, opix as isize, 1, 0.0, &mut dcols);
                col2im(&dcols, xd.c, xd.h, xd.w, g, oh, ow, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with stride equal to the kernel size (no overlap).
/// `weight` is `[C_in, C_out, k, k]`.
pub fn conv_transpose2d_forward(
    x: &[f32],
    xd: Dims,
    weight: &[f32],
    bias: Option<&[f32]>,
    out_channels: usize,
    k: usize,
) -> Vec<f32> {
    let (oh, ow) = (xd.h * k, xd.w * k);
    let ipix = xd.plane();
    let rows = out_channels * k * k;
    let mut y = vec![0.0f32; xd.n * out_channels * oh * ow];
    let mut ycols = vec![0.0f32; rows * ipix];
    for n in 0..xd.n {
        let xn = &x[n * xd.c * ipix..(n + 1) * xd.c * ipix];
        // ycols[rows × HW] = Wᵀ[rows × C_in] · X[C_in × HW]
        gemm(rows, xd.c, ipix, weight, 1, rows as isize, xn, ipix as isize, 1, 0.0, &mut ycols);
        let yn = &mut y[n * out_channels * oh * ow..(n + 1) * out_channels * oh * ow];
        for c in 0..out_channels {
            let b = bias.map_or(0.0, |b| b[c]);
            for a in 0..k {
                for bb in 0..k {
                    let src = &ycols[((c * k + a) * k + bb) * ipix..][..ipix];
                    for i in 0..xd.h {
                        let dst_row = &mut yn[(c * oh + i * k + a) * ow..][..ow];
                        for j in 0..xd.w {
                            dst_row[j * k + bb] = src[i * xd.w + j] + b;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Backward of [`conv_transpose2d_forward`]: `(dx, dweight, dbias)`.
pub fn conv_transpose2d_backward(
    x: &[f32],
    xd: Dims,
    weight: &[f32],
    dy: &[f32],
    out_channels: usize,
    k: usize,
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let (oh, ow) = (xd.h * k, xd.w * k);
    let ipix = xd.plane();
    let rows = out_channels * k * k;
    let mut dw = vec![0.0f32; xd.c * rows];
    let mut db = vec![0.0f32; out_channels];
    let mut dx = need_dx.then(|| vec![0.0f32; x.len()]);
    let mut dcols = vec![0.0f32; rows * ipix];
    for n in 0..xd.n {
        let dyn_ = &dy[n * out_channels * oh * ow..(n + 1) * out_channels * oh * ow];
        for c in 0..out_channels {
            db[c] += dyn_[c * oh * ow..(c + 1) * oh * ow].iter().map(|&v| v as f64).sum::<f64>() as f32;
            for a in 0..k {
                for bb in 0..k {
                    let dst = &mut dcols[((c * k + a) * k + bb) * ipix..][..ipix];
                    for i in 0..xd.h {
                        let src_row = &dyn_[(c * oh + i * k + a) * ow..][..ow];
                        for j in 0..xd.w {
                            dst[i * xd.w + j] = src_row[j * k + bb];
                        }
                    }
                }
            }
        }
        let xn = &x[n * xd.c * ipix..(n + 1) * xd.c * ipix];
        // dW[C_in × rows] += X[C_in × HW] · dcolsᵀ[HW × rows]
        gemm(xd.c, ipix, rows, xn, ipix as isize, 1, &dcols, 1, ipix as isize, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dX[C_in × HW] = W[C_in × rows] · dcols[rows × HW]
            let dxn = &mut dx[n * xd.c * ipix..(n + 1) * xd.c * ipix];
            gemm(xd.c, rows, ipix, weight, rows as isize, 1, &dcols, ipix as isize, 1, 0.0, dxn);
        }
    }
    (dx, dw, db)
}

/// Non-overlapping max pooling with window and stride `f`.
/// Returns the output and, per output element, the flat input index chosen.
pub fn maxpool_forward(x: &[f32], xd: Dims, f: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (xd.h / f, xd.w / f);
    let mut y = Vec::with_capacity(xd.n * xd.c * oh * ow);
    let mut idx = Vec::with_capacity(y.capacity());
    for plane in 0..xd.n * xd.c {
        let base = plane * xd.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut at = base + oy * f * xd.w + ox * f;
                for dy in 0..f {
                    let row = base + (oy * f + dy) * xd.w + ox * f;
                    for dx in 0..f {
                        let v = x[row + dx];
                        // NaN wins so that divergence stays visible downstream.
                        if v > best || v.is_nan() {
                            best = v;
                            at = row + dx;
                        }
                    }
                }
                y.push(best);
                idx.push(at as u32);
            }
        }
    }
    (y, idx)
}

pub fn maxpool_backward(dy: &[f32], idx: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (&g, &i) in dy.iter().zip(idx) {
        dx[i as usize] += g;
    }
    dx
}

/// Per-axis interpolation table for bilinear upsampling by an integer factor
/// with half-pixel centres and clamped borders.
fn interp_table(size: usize, f: usize) -> Vec<(usize, usize, f32)> {
    (0..size * f)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub fn upsample_bilinear_forward(x: &[f32], xd: Dims, f: usize) -> Vec<f32> {
    let (oh, ow) = (xd.h * f, xd.w * f);
    let ty = interp_table(xd.h, f);
    let tx = interp_table(xd.w, f);
    let mut y = vec![0.0f32; xd.n * xd.c * oh * ow];
    for plane in 0..xd.n * xd.c {
        let src = &x[plane * xd.plane()..(plane + 1) * xd.plane()];
        let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * xd.w..(y0 + 1) * xd.w];
            let r1 = &src[y1 * xd.w..(y1 + 1) * xd.w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                // Written as lerps so that constant inputs are reproduced exactly.
                let a = r0[x0] + fx * (r0[x1] - r0[x0]);
                let b = r1[x0] + fx * (r1[x1] - r1[x0]);
                dst[oy * ow + ox] = a + fy * (b - a);
            }
        }
    }
    y
}

pub fn upsample_bilinear_backward(dy: &[f32], xd: Dims, f: usize) -> Vec<f32> {
    let (oh, ow) = (xd.h * f, xd.w * f);
    let ty = interp_table(xd.h, f);
    let tx = interp_table(xd.w, f);
    let mut dx = vec![0.0f32; xd.len()];
    for plane in 0..xd.n * xd.c {
        let g = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * xd.plane()..(plane + 1) * xd.plane()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (1.0 - fy);
                let bot = v * fy;
                dst[y0 * xd.w + x0] += top * (1.0 - fx);
                dst[y0 * xd.w + x1] += top * fx;
                dst[y1 * xd.w + x0] += bot * (1.0 - fx);
                dst[y1 * xd.w + x1] += bot * fx;
            }
        }
    }
    dx
}

/// Per-channel batch statistics `(mean, biased variance)` over N, H, W.
pub fn channel_stats(x: &[f32], xd: Dims) -> (Vec<f64>, Vec<f64>) {
    let m = (xd.n * xd.plane()) as f64;
    let mut mean = vec![0.0f64; xd.c];
    let mut var = vec![0.0f64; xd.c];
    for c in 0..xd.c {
        let mut s = 0.0f64;
        for n in 0..xd.n {
            let off = (n * xd.c + c) * xd.plane();
            s += x[off..off + xd.plane()].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0f64;
        for n in 0..xd.n {
            let off = (n * xd.c + c) * xd.plane();
            q += x[off..off + xd.plane()]
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = q / m;
    }
    (mean, var)
}

/// Applies `y = gamma * (x - mean) * inv_std + beta` per channel and returns
/// `(y, xhat)`.
pub fn batchnorm_apply(
    x: &[f32],
    xd: Dims,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    for n in 0..xd.n {
        for c in 0..xd.c {
            let off = (n * xd.c + c) * xd.plane();
            let (mu, is) = (mean[c], inv_std[c]);
            for i in off..off + xd.plane() {
                let h = ((x[i] as f64 - mu) * is) as f32;
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}

/// Batch-norm backward. With `batch_stats` the statistics were computed from
/// the batch (training mode); otherwise they were constants.
/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    dy: &[f32],
    xhat: &[f32],
    xd: Dims,
    gamma: &[f32],
    inv_std: &[f64],
    batch_stats: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let m = (xd.n * xd.plane()) as f64;
    let mut dgamma = vec![0.0f32; xd.c];
    let mut dbeta = vec![0.0f32; xd.c];
    let mut sum_dy = vec![0.0f64; xd.c];
    let mut sum_dy_xhat = vec![0.0f64; xd.c];
    for n in 0..xd.n {
        for c in 0..xd.c {
            let off = (n * xd.c + c) * xd.plane();
            for i in off..off + xd.plane() {
                sum_dy[c] += dy[i] as f64;
                sum_dy_xhat[c] += dy[i] as f64 * xhat[i] as f64;
            }
        }
    }
    for c in 0..xd.c {
        dgamma[c] = sum_dy_xhat[c] as f32;
        dbeta[c] = sum_dy[c] as f32;
    }
    let mut dx = vec![0.0f32; dy.len()];
    for n in 0..xd.n {
        for c in 0..xd.c {
            let off = (n * xd.c + c) * xd.plane();
            let scale = gamma[c] as f64 * inv_std[c];
            for i in off..off + xd.plane() {
                let g = if batch_stats {
                    scale * (dy[i] as f64 - sum_dy[c] / m - xhat[i] as f64 * sum_dy_xhat[c] / m)
                } else {
                    scale * dy[i] as f64
                };
                dx[i] = g as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}
