//! Layer parameter containers and their forward/backward kernels.
//!
//! Kernels work on flat `N, C, H, W` buffers and run single-threaded, so
//! every reduction happens in a fixed order (sample, then channel, then
//! row-major spatial position) and results are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// Dense connection over all input channels (`groups = 1`).
    Standard,
    /// One filter per input channel (`groups = in_channels`).
    Depthwise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<F> {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out, in/groups, kh, kw`.
    pub weight: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub eps: F,
    pub momentum: F,
    /// Original channel identities; survive pruning so provenance stays stable.
    pub channel_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F> {
    pub in_features: usize,
    pub out_features: usize,
    /// `out, in`.
    pub weight: Tensor<F>,
    pub bias: Vec<F>,
}

pub(crate) fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Pool window along one axis: 2 where the axis allows it, otherwise 1.
pub(crate) fn pool_window(size: usize) -> usize {
    if size >= 2 {
        2
    } else {
        1
    }
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize, gamma_init: F) -> Self {
        Self {
            gamma: vec![gamma_init; channels],
            beta: vec![F::zero(); channels],
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            eps: F::of(1e-5),
            momentum: F::of(0.1),
            channel_ids: (0..channels as u32).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

pub(crate) struct Geometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

// ---------------------------------------------------------------------------
// convolution

pub(crate) fn im2col<F: Scalar>(x: &[F], g: &Geometry, conv: &Conv<F>, ho: usize, wo: usize) -> Vec<F> {
    let k = conv.kernel;
    let rows = g.c * k * k;
    let plane = ho * wo;
    let cols_n = g.n * plane;
    let mut cols = vec![F::zero(); rows * cols_n];
    let (s, p) = (conv.stride as isize, conv.padding as isize);
    for n in 0..g.n {
        for ci in 0..g.c {
            let src = &x[(n * g.c + ci) * g.h * g.w..(n * g.c + ci + 1) * g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n + n * plane..row * cols_n + (n + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &[F], g: &Geometry, conv: &Conv<F>, ho: usize, wo: usize, dx: &mut [F]) {
    let k = conv.kernel;
    let plane = ho * wo;
    let cols_n = g.n * plane;
    let (s, p) = (conv.stride as isize, conv.padding as isize);
    for n in 0..g.n {
        for ci in 0..g.c {
            let dst = &mut dx[(n * g.c + ci) * g.h * g.w..(n * g.c + ci + 1) * g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * cols_n + n * plane..row * cols_n + (n + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Standard convolution. Returns the output and the im2col buffer when `keep_cols`.
pub(crate) fn conv_forward<F: Scalar>(
    x: &[F],
    g: &Geometry,
    conv: &Conv<F>,
    ho: usize,
    wo: usize,
    keep_cols: bool,
) -> (Vec<F>, Option<Vec<F>>) {
    match conv.kind {
        ConvKind::Standard => {
            let cols = im2col(x, g, conv, ho, wo);
            let kdim = g.c * conv.kernel * conv.kernel;
            let plane = ho * wo;
            let cols_n = g.n * plane;
            let mut ybig = vec![F::zero(); conv.out_channels * cols_n];
            matmul(
                false,
                false,
                conv.out_channels,
                kdim,
                cols_n,
                conv.weight.data(),
                &cols,
                F::zero(),
                &mut ybig,
            );
            let mut y = vec![F::zero(); g.n * conv.out_channels * plane];
            for co in 0..conv.out_channels {
                for n in 0..g.n {
                    let src = &ybig[co * cols_n + n * plane..co * cols_n + (n + 1) * plane];
                    y[(n * conv.out_channels + co) * plane..(n * conv.out_channels + co + 1) * plane]
                        .copy_from_slice(src);
                }
            }
            (y, keep_cols.then_some(cols))
        }
        ConvKind::Depthwise => (depthwise_forward(x, g, conv, ho, wo), None),
    }
}

fn depthwise_forward<F: Scalar>(x: &[F], g: &Geometry, conv: &Conv<F>, ho: usize, wo: usize) -> Vec<F> {
    let k = conv.kernel;
    let (s, p) = (conv.stride as isize, conv.padding as isize);
    let w = conv.weight.data();
    let mut y = vec![F::zero(); g.n * g.c * ho * wo];
    for n in 0..g.n {
        for c in 0..g.c {
            let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
            let dst = &mut y[(n * g.c + c) * ho * wo..(n * g.c + c + 1) * ho * wo];
            let kern = &w[c * k * k..(c + 1) * k * k];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = F::zero();
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                acc = acc + kern[ky * k + kx] * src[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }
    y
}

/// Returns `(dx, dweight)`.
pub(crate) fn conv_backward<F: Scalar>(
    x: &[F],
    cols: Option<&[F]>,
    g: &Geometry,
    conv: &Conv<F>,
    ho: usize,
    wo: usize,
    dy: &[F],
) -> (Vec<F>, Vec<F>) {
    match conv.kind {
        ConvKind::Standard => {
            let owned;
            let cols = match cols {
                Some(c) => c,
                None => {
                    owned = im2col(x, g, conv, ho, wo);
                    &owned
                }
            };
            let kdim = g.c * conv.kernel * conv.kernel;
            let plane = ho * wo;
            let cols_n = g.n * plane;
            let cout = conv.out_channels;
            let mut dybig = vec![F::zero(); cout * cols_n];
            for co in 0..cout {
                for n in 0..g.n {
                    dybig[co * cols_n + n * plane..co * cols_n + (n + 1) * plane]
                        .copy_from_slice(&dy[(n * cout + co) * plane..(n * cout + co + 1) * plane]);
                }
            }
            let mut dw = vec![F::zero(); cout * kdim];
            matmul(false, true, cout, cols_n, kdim, &dybig, cols, F::zero(), &mut dw);
            let mut dcols = vec![F::zero(); kdim * cols_n];
            matmul(
                true,
                false,
                kdim,
                cout,
                cols_n,
                conv.weight.data(),
                &dybig,
                F::zero(),
                &mut dcols,
            );
            let mut dx = vec![F::zero(); x.len()];
            col2im(&dcols, g, conv, ho, wo, &mut dx);
            (dx, dw)
        }
        ConvKind::Depthwise => {
            let k = conv.kernel;
            let (s, p) = (conv.stride as isize, conv.padding as isize);
            let w = conv.weight.data();
            let mut dx = vec![F::zero(); x.len()];
            let mut dw = vec![F::zero(); w.len()];
            for n in 0..g.n {
                for c in 0..g.c {
                    let base = (n * g.c + c) * g.h * g.w;
                    let src = &x[base..base + g.h * g.w];
                    let dsrc = &mut dx[base..base + g.h * g.w];
                    let grad = &dy[(n * g.c + c) * ho * wo..(n * g.c + c + 1) * ho * wo];
                    let kern = &w[c * k * k..(c + 1) * k * k];
                    let dkern = &mut dw[c * k * k..(c + 1) * k * k];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = grad[oy * wo + ox];
                            for ky in 0..k {
                                let iy = oy as isize * s + ky as isize - p;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = ox as isize * s + kx as isize - p;
                                    if ix >= 0 && ix < g.w as isize {
                                        let at = iy as usize * g.w + ix as usize;
                                        dkern[ky * k + kx] = dkern[ky * k + kx] + gv * src[at];
                                        dsrc[at] = dsrc[at] + gv * kern[ky * k + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dx, dw)
        }
    }
}

// ---------------------------------------------------------------------------
// batch normalization

pub(crate) struct BnCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

pub(crate) struct BnBatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance of the mini-batch.
    pub var: Vec<F>,
    pub count: usize,
}

/// Train-mode normalization with mini-batch statistics.
pub(crate) fn bn_forward_train<F: Scalar>(
    x: &[F],
    g: &Geometry,
    bn: &BatchNorm<F>,
) -> (Vec<F>, BnCache<F>, BnBatchStats<F>) {
    let plane = g.h * g.w;
    let count = g.n * plane;
    let inv_count = F::one() / F::of(count as f64);
    let mut mean = vec![F::zero(); g.c];
    let mut var = vec![F::zero(); g.c];
    for c in 0..g.c {
        let mut sum = F::zero();
        for n in 0..g.n {
            for &v in &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane] {
                sum = sum + v;
            }
        }
        let mu = sum * inv_count;
        let mut sq = F::zero();
        for n in 0..g.n {
            for &v in &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane] {
                let d = v - mu;
                sq = sq + d * d;
            }
        }
        mean[c] = mu;
        var[c] = sq * inv_count;
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + bn.eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); x.len()];
    let mut y = vec![F::zero(); x.len()];
    for n in 0..g.n {
        for c in 0..g.c {
            let range = (n * g.c + c) * plane..(n * g.c + c + 1) * plane;
            for ((xh, yv), &xv) in xhat[range.clone()].iter_mut().zip(&mut y[range.clone()]).zip(&x[range]) {
                *xh = (xv - mean[c]) * inv_std[c];
                *yv = bn.gamma[c] * *xh + bn.beta[c];
            }
        }
    }
    (y, BnCache { xhat, inv_std }, BnBatchStats { mean, var, count })
}

pub(crate) fn bn_forward_eval<F: Scalar>(x: &[F], g: &Geometry, bn: &BatchNorm<F>) -> Vec<F> {
    let plane = g.h * g.w;
    let mut y = vec![F::zero(); x.len()];
    for c in 0..g.c {
        let scale = bn.gamma[c] / (bn.running_var[c] + bn.eps).sqrt();
        let shift = bn.beta[c] - scale * bn.running_mean[c];
        for n in 0..g.n {
            let range = (n * g.c + c) * plane..(n * g.c + c + 1) * plane;
            for (yv, &xv) in y[range.clone()].iter_mut().zip(&x[range]) {
                *yv = scale * xv + shift;
            }
        }
    }
    y
}

/// Exponential moving average of batch statistics; the running variance
/// tracks the unbiased estimate.
pub(crate) fn bn_update_running<F: Scalar>(bn: &mut BatchNorm<F>, stats: &BnBatchStats<F>) {
    let m = bn.momentum;
    let keep = F::one() - m;
    let unbias = if stats.count > 1 {
        F::of(stats.count as f64 / (stats.count - 1) as f64)
    } else {
        F::one()
    };
    for c in 0..bn.channels() {
        bn.running_mean[c] = keep * bn.running_mean[c] + m * stats.mean[c];
        bn.running_var[c] = keep * bn.running_var[c] + m * stats.var[c] * unbias;
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<F: Scalar>(
    dy: &[F],
    g: &Geometry,
    bn: &BatchNorm<F>,
    cache: &BnCache<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let plane = g.h * g.w;
    let count = F::of((g.n * plane) as f64);
    let mut dx = vec![F::zero(); dy.len()];
    let mut dgamma = vec![F::zero(); g.c];
    let mut dbeta = vec![F::zero(); g.c];
    for c in 0..g.c {
        let (mut sum_dy, mut sum_dy_xhat) = (F::zero(), F::zero());
        for n in 0..g.n {
            let range = (n * g.c + c) * plane..(n * g.c + c + 1) * plane;
            for (&d, &xh) in dy[range.clone()].iter().zip(&cache.xhat[range]) {
                sum_dy = sum_dy + d;
                sum_dy_xhat = sum_dy_xhat + d * xh;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = bn.gamma[c] * cache.inv_std[c] / count;
        for n in 0..g.n {
            let range = (n * g.c + c) * plane..(n * g.c + c + 1) * plane;
            for ((dxv, &d), &xh) in dx[range.clone()]
                .iter_mut()
                .zip(&dy[range.clone()])
                .zip(&cache.xhat[range])
            {
                *dxv = k * (count * d - sum_dy - xh * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// pooling

/// 2×2 stride-2 max pooling (window shrinks to 1 on unit-sized axes).
/// Returns the output and, per output cell, the flat input index of the max.
pub(crate) fn maxpool_forward<F: Scalar>(x: &[F], g: &Geometry) -> (Vec<F>, Vec<u32>, usize, usize) {
    let (ph, pw) = (pool_window(g.h), pool_window(g.w));
    let (ho, wo) = (g.h / ph, g.w / pw);
    let mut y = vec![F::zero(); g.n * g.c * ho * wo];
    let mut arg = vec![0u32; y.len()];
    for nc in 0..g.n * g.c {
        let base = nc * g.h * g.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * ph * g.w + ox * pw;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let at = base + (oy * ph + dy) * g.w + ox * pw + dx;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                let o = nc * ho * wo + oy * wo + ox;
                y[o] = x[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg, ho, wo)
}

pub(crate) fn maxpool_backward<F: Scalar>(dy: &[F], arg: &[u32], input_len: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); input_len];
    for (&d, &a) in dy.iter().zip(arg) {
        dx[a as usize] = dx[a as usize] + d;
    }
    dx
}

pub(crate) fn gap_forward<F: Scalar>(x: &[F], g: &Geometry) -> Vec<F> {
    let plane = g.h * g.w;
    let inv = F::one() / F::of(plane as f64);
    x.chunks(plane)
        .map(|ch| ch.iter().fold(F::zero(), |a, &b| a + b) * inv)
        .collect()
}

pub(crate) fn gap_backward<F: Scalar>(dy: &[F], g: &Geometry) -> Vec<F> {
    let plane = g.h * g.w;
    let inv = F::one() / F::of(plane as f64);
    let mut dx = Vec::with_capacity(dy.len() * plane);
    for &d in dy {
        dx.extend(std::iter::repeat_n(d * inv, plane));
    }
    dx
}

// ---------------------------------------------------------------------------
// dense

pub(crate) fn dense_forward<F: Scalar>(x: &[F], n: usize, dense: &Dense<F>) -> Vec<F> {
    let mut y = Vec::with_capacity(n * dense.out_features);
    for _ in 0..n {
        y.extend_from_slice(&dense.bias);
    }
    matmul(
        false,
        true,
        n,
        dense.in_features,
        dense.out_features,
        x,
        dense.weight.data(),
        F::one(),
        &mut y,
    );
    y
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn dense_backward<F: Scalar>(x: &[F], n: usize, dense: &Dense<F>, dy: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (fin, fout) = (dense.in_features, dense.out_features);
    let mut dw = vec![F::zero(); fout * fin];
    matmul(true, false, fout, n, fin, dy, x, F::zero(), &mut dw);
    let mut db = vec![F::zero(); fout];
    for row in dy.chunks(fout) {
        for (b, &d) in db.iter_mut().zip(row) {
            *b = *b + d;
        }
    }
    let mut dx = vec![F::zero(); n * fin];
    matmul(false, false, n, fout, fin, dy, dense.weight.data(), F::zero(), &mut dx);
    (dx, dw, db)
}
