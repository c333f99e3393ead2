//! Dense compute kernels behind the tape ops. Everything is plain row-major
//! loop nests; inner loops run over contiguous output rows so the compiler
//! can vectorize them.

use super::BnCtx;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn sigmoid<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn softplus<E: Scalar>(x: E) -> E {
    // log(1 + e^x) without overflow for large |x|.
    if x > E::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn smooth_l1<E: Scalar>(x: E) -> E {
    let half = E::from_f64(0.5);
    if x.abs() < E::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

/// Output height/width of a 2-d cross-correlation.
pub fn conv2d_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride < 1 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::invalid("conv2d kernel dims must be positive"));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok((
        (h + 2 * padding - kh) / stride + 1,
        (w + 2 * padding - kw) / stride + 1,
    ))
}

/// Valid output-column range for one kernel column: all `ox` with
/// `0 <= ox*stride + kx - padding < w`.
fn ox_range(ow: usize, w: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let off = kx as isize - padding as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi_excl = if off >= w as isize {
        0
    } else {
        ((w as isize - 1 - off) as usize / stride + 1).min(ow)
    };
    (lo.min(hi_excl), hi_excl)
}

/// Cross-correlation (no kernel flip): x [N,C,H,W] * w [K,C,kh,kw].
pub fn conv2d_forward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
            xs, ws
        )));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {}, kernel expects {}",
            xs[1], ws[1]
        )));
    }
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = conv2d_output_dims(h, wd, kh, kw, stride, padding)?;

    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![E::zero(); n * k * oh * ow];

    for in_n in 0..n {
        for kk in 0..k {
            let out_base = (in_n * k + kk) * oh * ow;
            for cc in 0..c {
                let in_base = (in_n * c + cc) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[((kk * c + cc) * kh + ky) * kw + kx];
                        let (lo, hi) = ox_range(ow, wd, kx, stride, padding);
                        let xoff = kx as isize - padding as isize;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * wd;
                            let out_row = out_base + oy * ow;
                            if stride == 1 {
                                let ix0 = (lo as isize + xoff) as usize;
                                let src = &xd[in_row + ix0..in_row + ix0 + (hi - lo)];
                                let dst = &mut out[out_row + lo..out_row + hi];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * stride) as isize + xoff;
                                    out[out_row + ox] += wv * xd[in_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, k, oh, ow], out)
}

/// dL/dx of conv2d: scatter `gout` back through the kernel.
pub fn conv2d_backward_data<E: Scalar>(
    wdat: &[E],
    wshape: &[usize],
    gout: &[E],
    xshape: &[usize],
    stride: usize,
    padding: usize,
    gx: &mut [E],
) {
    let (n, c, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (k, kh, kw) = (wshape[0], wshape[2], wshape[3]);
    let (oh, ow) = conv2d_output_dims(h, wd, kh, kw, stride, padding).expect("checked at forward");

    for in_n in 0..n {
        for kk in 0..k {
            let out_base = (in_n * k + kk) * oh * ow;
            for cc in 0..c {
                let in_base = (in_n * c + cc) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[((kk * c + cc) * kh + ky) * kw + kx];
                        let (lo, hi) = ox_range(ow, wd, kx, stride, padding);
                        let xoff = kx as isize - padding as isize;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * wd;
                            let out_row = out_base + oy * ow;
                            if stride == 1 {
                                let ix0 = (lo as isize + xoff) as usize;
                                let src = &gout[out_row + lo..out_row + hi];
                                let dst = &mut gx[in_row + ix0..in_row + ix0 + (hi - lo)];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * stride) as isize + xoff;
                                    gx[in_row + ix as usize] += wv * gout[out_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dL/dw of conv2d: correlate input with the output gradient.
pub fn conv2d_backward_weight<E: Scalar>(
    xd: &[E],
    xshape: &[usize],
    gout: &[E],
    wshape: &[usize],
    stride: usize,
    padding: usize,
    gw: &mut [E],
) {
    let (n, c, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (k, kh, kw) = (wshape[0], wshape[2], wshape[3]);
    let (oh, ow) = conv2d_output_dims(h, wd, kh, kw, stride, padding).expect("checked at forward");

    for in_n in 0..n {
        for kk in 0..k {
            let out_base = (in_n * k + kk) * oh * ow;
            for cc in 0..c {
                let in_base = (in_n * c + cc) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (lo, hi) = ox_range(ow, wd, kx, stride, padding);
                        let xoff = kx as isize - padding as isize;
                        let mut acc = E::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * wd;
                            let out_row = out_base + oy * ow;
                            if stride == 1 {
                                let ix0 = (lo as isize + xoff) as usize;
                                let xs = &xd[in_row + ix0..in_row + ix0 + (hi - lo)];
                                let gs = &gout[out_row + lo..out_row + hi];
                                for (&xv, &gv) in xs.iter().zip(gs) {
                                    acc += xv * gv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * stride) as isize + xoff;
                                    acc += xd[in_row + ix as usize] * gout[out_row + ox];
                                }
                            }
                        }
                        gw[((kk * c + cc) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// x [N,Fin] . w [Fin,Fout] + b [Fout].
pub fn linear_forward<E: Scalar>(
    xd: &[E],
    wd: &[E],
    bd: &[E],
    n: usize,
    f_in: usize,
    f_out: usize,
) -> Vec<E> {
    let mut out = vec![E::zero(); n * f_out];
    for r in 0..n {
        let orow = r * f_out;
        out[orow..orow + f_out].copy_from_slice(bd);
        for i in 0..f_in {
            let xv = xd[r * f_in + i];
            let wrow = i * f_out;
            for j in 0..f_out {
                out[orow + j] += xv * wd[wrow + j];
            }
        }
    }
    out
}

pub fn linear_backward_data<E: Scalar>(
    gout: &[E],
    wd: &[E],
    n: usize,
    f_in: usize,
    f_out: usize,
    gx: &mut [E],
) {
    for r in 0..n {
        let grow = r * f_out;
        for i in 0..f_in {
            let wrow = i * f_out;
            let mut acc = E::zero();
            for j in 0..f_out {
                acc += gout[grow + j] * wd[wrow + j];
            }
            gx[r * f_in + i] += acc;
        }
    }
}

pub fn linear_backward_weight<E: Scalar>(
    gout: &[E],
    xd: &[E],
    n: usize,
    f_in: usize,
    f_out: usize,
    gw: &mut [E],
) {
    for r in 0..n {
        let grow = r * f_out;
        for i in 0..f_in {
            let xv = xd[r * f_in + i];
            let wrow = i * f_out;
            for j in 0..f_out {
                gw[wrow + j] += xv * gout[grow + j];
            }
        }
    }
}

/// 2x2/stride-2 max pooling. Odd trailing rows/columns are treated as padded
/// with negative infinity, so output dims are ceil(h/2) x ceil(w/2).
/// Returns the pooled tensor and the input linear index of each window's
/// maximum (ties resolved to the lowest linear index).
pub fn maxpool2_forward<E: Scalar>(x: &Tensor<E>) -> Result<(Tensor<E>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("maxpool2d expects rank-4 input, got {:?}", s)));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h == 0 || w == 0 {
        return Err(Error::shape("maxpool2d requires nonempty spatial dims"));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xd = x.data();
    let mut out = vec![E::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];

    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = E::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    let iy = oy * 2 + dy;
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..2 {
                        let ix = ox * 2 + dx;
                        if ix >= w {
                            continue;
                        }
                        let idx = in_base + iy * w + ix;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[out_base + oy * ow + ox] = best;
                argmax[out_base + oy * ow + ox] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn upsample_nearest_forward<E: Scalar>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "upsample_nearest expects rank-4 input, got {:?}",
            s
        )));
    }
    if factor < 1 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![E::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for oy in 0..oh {
            let iy = oy / factor;
            let in_row = in_base + iy * w;
            let out_row = out_base + oy * ow;
            for ox in 0..ow {
                out[out_row + ox] = xd[in_row + ox / factor];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest_backward<E: Scalar>(
    gout: &[E],
    xshape: &[usize],
    factor: usize,
    gx: &mut [E],
) {
    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (oh, ow) = (h * factor, w * factor);
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for oy in 0..oh {
            let iy = oy / factor;
            let in_row = in_base + iy * w;
            let out_row = out_base + oy * ow;
            for ox in 0..ow {
                gx[in_row + ox / factor] += gout[out_row + ox];
            }
        }
    }
}

/// Per-channel batch normalization over (N,H,W). In train mode the batch
/// statistics are used and `running` is updated in place; in eval mode the
/// running statistics are used unchanged. Statistics accumulate in f64 so the
/// f32 path stays well conditioned.
pub fn batchnorm_forward<E: Scalar>(
    x: &Tensor<E>,
    gamma: &[E],
    beta: &[E],
    running_mean: &mut [E],
    running_var: &mut [E],
    train: bool,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<E>, BnCtx<E>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("batchnorm2d expects rank-4 input, got {:?}", s)));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batchnorm2d gamma/beta must have {c} channels, got {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    let m = n * h * w;
    if train && m <= 1 {
        return Err(Error::invalid(
            "batchnorm2d train mode needs more than one element per channel (variance gradient undefined)",
        ));
    }
    let xd = x.data();
    let plane = h * w;
    let mut mean = vec![E::zero(); c];
    let mut invstd = vec![E::zero(); c];

    for cc in 0..c {
        let (mu, var) = if train {
            let mut sum = 0.0f64;
            for nn in 0..n {
                let base = (nn * c + cc) * plane;
                for k in 0..plane {
                    sum += xd[base + k].to_f64();
                }
            }
            let mu = sum / m as f64;
            let mut sq = 0.0f64;
            for nn in 0..n {
                let base = (nn * c + cc) * plane;
                for k in 0..plane {
                    let d = xd[base + k].to_f64() - mu;
                    sq += d * d;
                }
            }
            let var = sq / m as f64;
            running_mean[cc] = E::from_f64(
                (1.0 - momentum) * running_mean[cc].to_f64() + momentum * mu,
            );
            running_var[cc] =
                E::from_f64((1.0 - momentum) * running_var[cc].to_f64() + momentum * var);
            (mu, var)
        } else {
            (running_mean[cc].to_f64(), running_var[cc].to_f64())
        };
        mean[cc] = E::from_f64(mu);
        invstd[cc] = E::from_f64(1.0 / (var + eps).sqrt());
    }

    let mut out = vec![E::zero(); xd.len()];
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * plane;
            let (mu, istd, g, b) = (mean[cc], invstd[cc], gamma[cc], beta[cc]);
            for k in 0..plane {
                out[base + k] = (xd[base + k] - mu) * istd * g + b;
            }
        }
    }
    Ok((
        Tensor::new(s.to_vec(), out)?,
        BnCtx {
            mean,
            invstd,
            train,
        },
    ))
}

pub fn batchnorm_backward_beta<E: Scalar>(gout: &[E], xshape: &[usize], gbeta: &mut [E]) {
    let (n, c, plane) = (xshape[0], xshape[1], xshape[2] * xshape[3]);
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * plane;
            let mut acc = 0.0f64;
            for k in 0..plane {
                acc += gout[base + k].to_f64();
            }
            gbeta[cc] += E::from_f64(acc);
        }
    }
}

pub fn batchnorm_backward_gamma<E: Scalar>(
    gout: &[E],
    xd: &[E],
    xshape: &[usize],
    ctx: &BnCtx<E>,
    ggamma: &mut [E],
) {
    let (n, c, plane) = (xshape[0], xshape[1], xshape[2] * xshape[3]);
    for cc in 0..c {
        let (mu, istd) = (ctx.mean[cc], ctx.invstd[cc]);
        let mut acc = 0.0f64;
        for nn in 0..n {
            let base = (nn * c + cc) * plane;
            for k in 0..plane {
                acc += (gout[base + k] * (xd[base + k] - mu) * istd).to_f64();
            }
        }
        ggamma[cc] += E::from_f64(acc);
    }
}

pub fn batchnorm_backward_data<E: Scalar>(
    gout: &[E],
    xd: &[E],
    xshape: &[usize],
    gamma: &[E],
    ctx: &BnCtx<E>,
    gx: &mut [E],
) {
    let (n, c, plane) = (xshape[0], xshape[1], xshape[2] * xshape[3]);
    let m = (n * plane) as f64;
    for cc in 0..c {
        let (mu, istd, g) = (ctx.mean[cc], ctx.invstd[cc], gamma[cc]);
        if !ctx.train {
            // Running statistics are constants in eval mode.
            let scale = g * istd;
            for nn in 0..n {
                let base = (nn * c + cc) * plane;
                for k in 0..plane {
                    gx[base + k] += gout[base + k] * scale;
                }
            }
            continue;
        }
        // Full gradient through the batch mean and variance.
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for nn in 0..n {
            let base = (nn * c + cc) * plane;
            for k in 0..plane {
                let dy = gout[base + k].to_f64();
                let xhat = ((xd[base + k] - mu) * istd).to_f64();
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        let mean_dy = E::from_f64(sum_dy / m);
        let mean_dy_xhat = E::from_f64(sum_dy_xhat / m);
        let scale = g * istd;
        for nn in 0..n {
            let base = (nn * c + cc) * plane;
            for k in 0..plane {
                let xhat = (xd[base + k] - mu) * istd;
                gx[base + k] += scale * (gout[base + k] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
}

/// Scatter a reduced-axes gradient back over the input, scaled by `scale`.
pub fn reduce_backward_broadcast<E: Scalar>(
    gout: &[E],
    xshape: &[usize],
    axes: &[usize],
    scale: E,
    gx: &mut [E],
) {
    let strides = crate::tensor::strides(xshape);
    let kept: Vec<usize> = (0..xshape.len()).filter(|d| !axes.contains(d)).collect();
    let out_strides: Vec<usize> = {
        let kept_dims: Vec<usize> = kept.iter().map(|&d| xshape[d]).collect();
        crate::tensor::strides(&kept_dims)
    };
    for (lin, slot) in gx.iter_mut().enumerate() {
        let mut out_idx = 0usize;
        for (pos, &d) in kept.iter().enumerate() {
            let coord = (lin / strides[d]) % xshape[d];
            out_idx += coord * out_strides[pos];
        }
        *slot += gout[out_idx] * scale;
    }
}

/// Numerically stable softmax of one row (max subtraction).
pub fn softmax_row<E: Scalar>(row: &[E], out: &mut [E]) {
    let mut mx = row[0];
    for &v in &row[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-sum-exp of one row, for log-domain cross entropy.
pub fn logsumexp_row<E: Scalar>(row: &[E]) -> E {
    let mut mx = row[0];
    for &v in &row[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = E::zero();
    for &v in row {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}
