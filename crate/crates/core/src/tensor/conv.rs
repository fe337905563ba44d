use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output extent of a window op: `floor((len + 2p - k) / s) + 1`.
pub fn conv_out_dim(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || k == 0 || len + 2 * padding < k {
        return None;
    }
    Some((len + 2 * padding - k) / stride + 1)
}

/// Range of output positions `o` for which `o*s + tap - p` lies inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, tap: usize, stride: usize, padding: usize) -> (usize, usize) {
    // o*s + tap >= p  and  o*s + tap - p <= len - 1
    let lo = if tap >= padding {
        0
    } else {
        (padding - tap).div_ceil(stride)
    };
    let hi_num = len + padding - 1;
    if hi_num < tap {
        return (0, 0);
    }
    let hi = ((hi_num - tap) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn check_window(op: &'static str, k: usize, stride: usize, padding: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    if padding != 0 && padding != k / 2 {
        return Err(Error::invalid(
            op,
            format!("padding {padding} must be 0 or {} for kernel {k}", k / 2),
        ));
    }
    Ok(())
}

fn out_hw(op: &'static str, s: Shape, k: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
    match (
        conv_out_dim(s.h, k, stride, padding),
        conv_out_dim(s.w, k, stride, padding),
    ) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::invalid(
            op,
            format!("kernel {k} with padding {padding} does not fit input {s}"),
        )),
    }
}

/// Bias-free 2-D cross-correlation. `weight` has shape `(oc, ic, k, k)`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.h != ws.w || ws.c != xs.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    let k = ws.h;
    check_window("conv2d", k, stride, padding)?;
    let (oh, ow) = out_hw("conv2d", xs, k, stride, padding)?;
    let oc = ws.n;
    let ic = xs.c;
    let out_shape = Shape::new(xs.n, oc, oh, ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let xd = x.data();
    let wd = weight.data();
    let in_plane = xs.plane();
    let out_plane = oh * ow;
    if out_plane == 0 {
        return Tensor::new(out_shape, out);
    }
    out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, dst)| {
        let n = idx / oc;
        let o = idx % oc;
        for c in 0..ic {
            let src = &xd[(n * ic + c) * in_plane..(n * ic + c + 1) * in_plane];
            let wbase = (o * ic + c) * k * k;
            for kh in 0..k {
                let (y0, y1) = valid_range(oh, xs.h, kh, stride, padding);
                for kw in 0..k {
                    let wv = wd[wbase + kh * k + kw];
                    let (x0, x1) = valid_range(ow, xs.w, kw, stride, padding);
                    for y in y0..y1 {
                        let iy = y * stride + kh - padding;
                        let row = &src[iy * xs.w..];
                        let drow = &mut dst[y * ow..(y + 1) * ow];
                        for (xo, d) in (x0..x1).zip(&mut drow[x0..x1]) {
                            *d += wv * row[xo * stride + kw - padding];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let ws = weight.shape();
    let gs = grad_out.shape();
    let k = ws.h;
    let (oh, ow) = out_hw("conv2d_backward", xs, k, stride, padding)?;
    if gs != Shape::new(xs.n, ws.n, oh, ow) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: gs,
            rhs: Shape::new(xs.n, ws.n, oh, ow),
        });
    }
    let oc = ws.n;
    let ic = xs.c;
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let in_plane = xs.plane();
    let out_plane = oh * ow;

    let mut gx = vec![T::zero(); xs.numel()];
    if in_plane > 0 {
        gx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, dst)| {
            let n = idx / ic;
            let c = idx % ic;
            for o in 0..oc {
                let g = &gd[(n * oc + o) * out_plane..(n * oc + o + 1) * out_plane];
                let wbase = (o * ic + c) * k * k;
                for kh in 0..k {
                    let (y0, y1) = valid_range(oh, xs.h, kh, stride, padding);
                    for kw in 0..k {
                        let wv = wd[wbase + kh * k + kw];
                        let (x0, x1) = valid_range(ow, xs.w, kw, stride, padding);
                        for y in y0..y1 {
                            let iy = y * stride + kh - padding;
                            for xo in x0..x1 {
                                let ix = xo * stride + kw - padding;
                                dst[iy * xs.w + ix] += wv * g[y * ow + xo];
                            }
                        }
                    }
                }
            }
        });
    }

    let mut gw = vec![T::zero(); ws.numel()];
    let per_oc = ic * k * k;
    if per_oc > 0 {
        gw.par_chunks_mut(per_oc).enumerate().for_each(|(o, dst)| {
            for c in 0..ic {
                for kh in 0..k {
                    let (y0, y1) = valid_range(oh, xs.h, kh, stride, padding);
                    for kw in 0..k {
                        let (x0, x1) = valid_range(ow, xs.w, kw, stride, padding);
                        let mut acc = T::zero();
                        for n in 0..xs.n {
                            let src = &xd[(n * ic + c) * in_plane..];
                            let g = &gd[(n * oc + o) * out_plane..];
                            for y in y0..y1 {
                                let iy = y * stride + kh - padding;
                                for xo in x0..x1 {
                                    let ix = xo * stride + kw - padding;
                                    acc += g[y * ow + xo] * src[iy * xs.w + ix];
                                }
                            }
                        }
                        dst[(c * k + kh) * k + kw] = acc;
                    }
                }
            }
        });
    }
    Ok((Tensor::new(xs, gx)?, Tensor::new(ws, gw)?))
}

/// Per-channel convolution. `weight` has shape `(c, 1, k, k)`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.n != xs.c || ws.c != 1 || ws.h != ws.w {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    let k = ws.h;
    check_window("depthwise_conv2d", k, stride, padding)?;
    let (oh, ow) = out_hw("depthwise_conv2d", xs, k, stride, padding)?;
    let c = xs.c;
    let out_shape = Shape::new(xs.n, c, oh, ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let xd = x.data();
    let wd = weight.data();
    let in_plane = xs.plane();
    let out_plane = oh * ow;
    if out_plane == 0 {
        return Tensor::new(out_shape, out);
    }
    out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, dst)| {
        let ch = idx % c;
        let src = &xd[idx * in_plane..(idx + 1) * in_plane];
        for kh in 0..k {
            let (y0, y1) = valid_range(oh, xs.h, kh, stride, padding);
            for kw in 0..k {
                let wv = wd[(ch * k + kh) * k + kw];
                let (x0, x1) = valid_range(ow, xs.w, kw, stride, padding);
                for y in y0..y1 {
                    let iy = y * stride + kh - padding;
                    for xo in x0..x1 {
                        let ix = xo * stride + kw - padding;
                        dst[y * ow + xo] += wv * src[iy * xs.w + ix];
                    }
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let ws = weight.shape();
    let k = ws.h;
    let (oh, ow) = out_hw("depthwise_conv2d_backward", xs, k, stride, padding)?;
    let expect = Shape::new(xs.n, xs.c, oh, ow);
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d_backward",
            lhs: grad_out.shape(),
            rhs: expect,
        });
    }
    let c = xs.c;
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let in_plane = xs.plane();
    let out_plane = oh * ow;

    let mut gx = vec![T::zero(); xs.numel()];
    if in_plane > 0 {
        gx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, dst)| {
            let ch = idx % c;
            let g = &gd[idx * out_plane..(idx + 1) * out_plane];
            for kh in 0..k {
                let (y0, y1) = valid_range(oh, xs.h, kh, stride, padding);
                for kw in 0..k {
                    let wv = wd[(ch * k + kh) * k + kw];
                    let (x0, x1) = valid_range(ow, xs.w, kw, stride, padding);
                    for y in y0..y1 {
                        let iy = y * stride + kh - padding;
                        for xo in x0..x1 {
                            let ix = xo * stride + kw - padding;
                            dst[iy * xs.w + ix] += wv * g[y * ow + xo];
                        }
                    }
                }
            }
        });
    }

    let mut gw = vec![T::zero(); ws.numel()];
    if k > 0 {
        gw.par_chunks_mut(k * k).enumerate().for_each(|(ch, dst)| {
            for kh in 0..k {
                let (y0, y1) = valid_range(oh, xs.h, kh, stride, padding);
                for kw in 0..k {
                    let (x0, x1) = valid_range(ow, xs.w, kw, stride, padding);
                    let mut acc = T::zero();
                    for n in 0..xs.n {
                        let idx = n * c + ch;
                        let src = &xd[idx * in_plane..];
                        let g = &gd[idx * out_plane..];
                        for y in y0..y1 {
                            let iy = y * stride + kh - padding;
                            for xo in x0..x1 {
                                let ix = xo * stride + kw - padding;
                                acc += g[y * ow + xo] * src[iy * xs.w + ix];
                            }
                        }
                    }
                    dst[kh * k + kw] = acc;
                }
            }
        });
    }
    Ok((Tensor::new(xs, gx)?, Tensor::new(ws, gw)?))
}
