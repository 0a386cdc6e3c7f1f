//! Forward and backward kernels for the layer types the executor supports.
//!
//! Weights are always stored at full width. Kernels take the full buffers and
//! read or write only the leading `out_channels x in_channels` block, so the
//! same code runs physically sliced subnets and the full masked supernet.

use crate::tensor::{gemm, Scalar, Tensor, View};

pub const BN_EPS: f64 = 1e-5;

/// Geometry of a convolution whose weight tensor has shape
/// `(full_out, full_in, kh, kw)` (or `(full_out, 1, kh, kw)` when depthwise).
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub full_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds `x` into a `(c * kh * kw) x (n * oh * ow)` column matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, g: &ConvGeom) -> Vec<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (g.out_h, g.out_w);
    let cols = n * oh * ow;
    let mut out = vec![T::zero(); c * g.taps() * cols];
    let xd = x.data();
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let src = &xd[(ni * c + ci) * h * w..][..h * w];
                    for oi in 0..oh {
                        let ih = (oi * g.stride + ki) as isize - g.padding as isize;
                        let base = (ni * oh + oi) * ow;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let srow = &src[ih as usize * w..][..w];
                        for oj in 0..ow {
                            let iw = (oj * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[base + oj] = srow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols: &[T], shape: [usize; 4], g: &ConvGeom) -> Tensor<T> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (g.out_h, g.out_w);
    let ncols = n * oh * ow;
    let mut x = Tensor::zeros(shape);
    let xd = x.data_mut();
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let dst = &mut xd[(ni * c + ci) * h * w..][..h * w];
                    for oi in 0..oh {
                        let ih = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = (ni * oh + oi) * ow;
                        for oj in 0..ow {
                            let iw = (oj * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < w as isize {
                                let d = &mut dst[ih as usize * w + iw as usize];
                                *d = *d + src[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(c, n*s)` matrix to `(n, c, s)` tensor layout.
fn cm_to_nchw<T: Scalar>(m: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * s];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * s..][..s].copy_from_slice(&m[ci * n * s + ni * s..][..s]);
        }
    }
    out
}

fn nchw_to_cm<T: Scalar>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * s];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * s + ni * s..][..s].copy_from_slice(&x[(ni * c + ci) * s..][..s]);
        }
    }
    out
}

/// Saved unfolded input of a standard convolution.
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
}

/// Standard convolution using the leading `out_ch x x.channels()` weight block.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_ch: usize,
    g: &ConvGeom,
) -> (Tensor<T>, ConvCache<T>) {
    let [n, c, _, _] = x.shape();
    let s = g.out_h * g.out_w;
    let cols = if g.is_pointwise() {
        nchw_to_cm(x.data(), n, c, s)
    } else {
        im2col(x, g)
    };
    let k = c * g.taps();
    let mut out_cm = vec![T::zero(); out_ch * n * s];
    let wv = View {
        off: 0,
        rs: g.full_in * g.taps(),
        cs: 1,
    };
    gemm(
        out_ch,
        k,
        n * s,
        T::one(),
        weight,
        wv,
        &cols,
        View::row_major(0, n * s),
        T::zero(),
        &mut out_cm,
        View::row_major(0, n * s),
    );
    let mut data = cm_to_nchw(&out_cm, n, out_ch, s);
    if let Some(b) = bias {
        for ni in 0..n {
            for co in 0..out_ch {
                for v in &mut data[(ni * out_ch + co) * s..][..s] {
                    *v = *v + b[co];
                }
            }
        }
    }
    let out = Tensor::from_vec([n, out_ch, g.out_h, g.out_w], data).expect("conv output shape");
    (
        out,
        ConvCache {
            cols,
            in_shape: x.shape(),
        },
    )
}

/// Accumulates weight/bias gradients into the leading block of the full
/// gradient buffers and returns the input gradient when requested.
pub fn conv_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &ConvCache<T>,
    weight: &[T],
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    g: &ConvGeom,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [n, c, _, _] = cache.in_shape;
    let out_ch = dy.channels();
    let s = g.out_h * g.out_w;
    let k = c * g.taps();
    let dy_cm = nchw_to_cm(dy.data(), n, out_ch, s);
    let wv = View {
        off: 0,
        rs: g.full_in * g.taps(),
        cs: 1,
    };
    gemm(
        out_ch,
        n * s,
        k,
        T::one(),
        &dy_cm,
        View::row_major(0, n * s),
        &cache.cols,
        View::row_major(0, n * s).t(),
        T::one(),
        dweight,
        wv,
    );
    if let Some(db) = dbias {
        for co in 0..out_ch {
            let sum: T = dy_cm[co * n * s..][..n * s].iter().copied().sum();
            db[co] = db[co] + sum;
        }
    }
    if !need_dx {
        return None;
    }
    let mut dcols = vec![T::zero(); k * n * s];
    gemm(
        k,
        out_ch,
        n * s,
        T::one(),
        weight,
        wv.t(),
        &dy_cm,
        View::row_major(0, n * s),
        T::zero(),
        &mut dcols,
        View::row_major(0, n * s),
    );
    Some(if g.is_pointwise() {
        Tensor::from_vec(cache.in_shape, cm_to_nchw(&dcols, n, c, s)).expect("dx shape")
    } else {
        col2im(&dcols, cache.in_shape, g)
    })
}

/// Depthwise convolution over the `x.channels()` leading channels.
pub fn depthwise_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], g: &ConvGeom) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (g.out_h, g.out_w);
    let taps = g.taps();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let src = &xd[(ni * c + ci) * h * w..][..h * w];
            let dst = &mut od[(ni * c + ci) * oh * ow..][..oh * ow];
            let wk = &weight[ci * taps..][..taps];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = T::zero();
                    for ki in 0..g.kh {
                        let ih = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let iw = (oj * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < w as isize {
                                acc = acc + src[ih as usize * w + iw as usize] * wk[ki * g.kw + kj];
                            }
                        }
                    }
                    dst[oi * ow + oj] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &[T],
    dweight: &mut [T],
    g: &ConvGeom,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (g.out_h, g.out_w);
    let taps = g.taps();
    let mut dx = if need_dx {
        Some(Tensor::zeros(x.shape()))
    } else {
        None
    };
    let xd = x.data();
    let dyd = dy.data();
    for ni in 0..n {
        for ci in 0..c {
            let src = &xd[(ni * c + ci) * h * w..][..h * w];
            let grad = &dyd[(ni * c + ci) * oh * ow..][..oh * ow];
            for oi in 0..oh {
                for oj in 0..ow {
                    let gv = grad[oi * ow + oj];
                    for ki in 0..g.kh {
                        let ih = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let iw = (oj * g.stride + kj) as isize - g.padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let xi = ih as usize * w + iw as usize;
                            let wi = ci * taps + ki * g.kw + kj;
                            dweight[wi] = dweight[wi] + gv * src[xi];
                            if let Some(dx) = dx.as_mut() {
                                let d = &mut dx.data_mut()[(ni * c + ci) * h * w + xi];
                                *d = *d + gv * weight[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Normalized activations and inverse standard deviations per channel.
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-channel mean and biased variance over rows and spatial positions,
/// accumulated in `f64`.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = x.shape();
    let s = x.plane();
    let count = (n * s) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            sum += xd[(ni * c + ci) * s..][..s].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for ni in 0..n {
            sq += xd[(ni * c + ci) * s..][..s]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = sq / count;
    }
    (mean, var)
}

/// Batch normalization over the leading `x.channels()` channels. With
/// `running = None` the current batch statistics are used; otherwise the
/// given `(mean, var)` buffers.
pub fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Tensor<T>, BnCache<T>) {
    let [n, c, _, _] = x.shape();
    let s = x.plane();
    let eps = BN_EPS;
    let (mean, inv_std): (Vec<T>, Vec<T>) = match running {
        Some((rm, rv)) => (
            rm[..c].to_vec(),
            rv[..c]
                .iter()
                .map(|v| T::from_f64_lossy(1.0 / (v.as_f64() + eps).sqrt()))
                .collect(),
        ),
        None => {
            let (m, v) = channel_moments(x);
            (
                m.iter().map(|&m| T::from_f64_lossy(m)).collect(),
                v.iter()
                    .map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt()))
                    .collect(),
            )
        }
    };
    let mut xhat = vec![T::zero(); x.data().len()];
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            for i in base..base + s {
                let h = (xd[i] - mean[ci]) * inv_std[ci];
                xhat[i] = h;
                od[i] = gamma[ci] * h + beta[ci];
            }
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            batch_stats: running.is_none(),
        },
    )
}

pub fn bn_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let [n, c, _, _] = dy.shape();
    let s = dy.plane();
    let m = T::from_usize(n * s).unwrap();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(dy.shape());
    let dxd = dx.data_mut();
    for ci in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for i in base..base + s {
                sum_dy = sum_dy + dyd[i];
                sum_dy_xhat = sum_dy_xhat + dyd[i] * cache.xhat[i];
            }
        }
        dgamma[ci] = dgamma[ci] + sum_dy_xhat;
        dbeta[ci] = dbeta[ci] + sum_dy;
        let scale = gamma[ci] * cache.inv_std[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for i in base..base + s {
                dxd[i] = if cache.batch_stats {
                    scale / m * (m * dyd[i] - sum_dy - cache.xhat[i] * sum_dy_xhat)
                } else {
                    scale * dyd[i]
                };
            }
        }
    }
    dx
}

pub fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` wherever the ReLU output `y` was not positive.
pub fn relu_backward_in_place<T: Scalar>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    for (d, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
}

pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let s = x.plane();
    let inv = T::one() / T::from_usize(s).unwrap();
    let data = x
        .data()
        .chunks(s)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data).expect("pool shape")
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let s = in_shape[2] * in_shape[3];
    let inv = T::one() / T::from_usize(s).unwrap();
    let mut dx = Tensor::zeros(in_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(s).zip(dy.data()) {
        plane.fill(g * inv);
    }
    dx
}

/// Max pooling; returns the output and the flat input index of each maximum.
pub fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let mut arg = vec![0usize; n * c * out_h * out_w];
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        for oi in 0..out_h {
            for oj in 0..out_w {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..kernel {
                    let ih = (oi * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let iw = (oj * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = p * h * w + ih as usize * w + iw as usize;
                        if xd[idx] > best || best_i == usize::MAX {
                            best = xd[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (p * out_h + oi) * out_w + oj;
                od[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(dy: &Tensor<T>, arg: &[usize], in_shape: [usize; 4]) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dy.data()) {
        dxd[i] = dxd[i] + g;
    }
    dx
}

/// Zeroes channels `>= active` on rows `[start, end)`.
pub fn mask_rows<T: Scalar>(x: &mut Tensor<T>, start: usize, end: usize, active: usize) {
    let c = x.channels();
    if active >= c {
        return;
    }
    let s = x.plane();
    let row = x.row_len();
    let d = x.data_mut();
    for ni in start..end {
        d[ni * row + active * s..(ni + 1) * row].fill(T::zero());
    }
}

/// Mean softmax cross-entropy over rows `[start, end)` of `logits`
/// (shape `(n, classes, 1, 1)`). Writes `d loss / d logits` for those rows
/// into `dlogits` and returns the loss.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    start: usize,
    end: usize,
    dlogits: Option<&mut Tensor<T>>,
) -> f64 {
    let classes = logits.row_len();
    let ld = logits.data();
    let rows = (end - start) as f64;
    let mut loss = 0.0;
    let mut grads = dlogits;
    for r in start..end {
        let z = &ld[r * classes..][..classes];
        let max = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let label = labels[r];
        loss += -(exps[label] / sum).ln();
        if let Some(g) = grads.as_deref_mut() {
            let gd = &mut g.data_mut()[r * classes..][..classes];
            for (k, e) in exps.iter().enumerate() {
                let p = e / sum - if k == label { 1.0 } else { 0.0 };
                gd[k] = T::from_f64_lossy(p / rows);
            }
        }
    }
    loss / rows
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.row_len();
    logits
        .data()
        .chunks(classes)
        .map(|z| {
            let mut best = 0;
            for k in 1..z.len() {
                if z[k] > z[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
