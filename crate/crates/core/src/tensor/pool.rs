use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::conv_out_dim;
use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

fn pool_dims(x: Shape, k: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
    if k == 0 {
        return Err(Error::invalid("pool2d", "kernel must be >= 1"));
    }
    if padding > k / 2 {
        return Err(Error::invalid(
            "pool2d",
            format!("padding {padding} exceeds half the kernel {k}"),
        ));
    }
    match (
        conv_out_dim(x.h, k, stride, padding),
        conv_out_dim(x.w, k, stride, padding),
    ) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::invalid(
            "pool2d",
            format!("window {k}/{stride}/{padding} does not fit input {x}"),
        )),
    }
}

/// In-bounds window `[lo, hi)` along one axis for output index `o`.
#[inline]
fn window(o: usize, len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let start = (o * stride) as isize - padding as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + k as isize).max(0) as usize).min(len);
    (lo, hi)
}

/// Average or max pooling. Average divides by the number of in-bounds taps.
pub fn pool2d<T: Scalar>(x: &Tensor<T>, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let (oh, ow) = pool_dims(xs, k, stride, padding)?;
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let in_plane = xs.plane();
    let out_plane = oh * ow;
    let xd = x.data();
    if out_plane == 0 {
        return Tensor::new(out_shape, out);
    }
    out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, dst)| {
        let src = &xd[idx * in_plane..(idx + 1) * in_plane];
        for y in 0..oh {
            let (y0, y1) = window(y, xs.h, k, stride, padding);
            for xo in 0..ow {
                let (x0, x1) = window(xo, xs.w, k, stride, padding);
                dst[y * ow + xo] = match kind {
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc += src[iy * xs.w + ix];
                            }
                        }
                        acc / T::lit(((y1 - y0) * (x1 - x0)) as f64)
                    }
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                let v = src[iy * xs.w + ix];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        best
                    }
                };
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// Max pooling routes the gradient to the first maximal tap in window order.
pub fn pool2d_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let (oh, ow) = pool_dims(xs, k, stride, padding)?;
    let expect = Shape::new(xs.n, xs.c, oh, ow);
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "pool2d_backward",
            lhs: grad_out.shape(),
            rhs: expect,
        });
    }
    let in_plane = xs.plane();
    let out_plane = oh * ow;
    let xd = x.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); xs.numel()];
    if in_plane == 0 {
        return Tensor::new(xs, gx);
    }
    gx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, dst)| {
        let src = &xd[idx * in_plane..(idx + 1) * in_plane];
        let g = &gd[idx * out_plane..(idx + 1) * out_plane];
        for y in 0..oh {
            let (y0, y1) = window(y, xs.h, k, stride, padding);
            for xo in 0..ow {
                let (x0, x1) = window(xo, xs.w, k, stride, padding);
                let gv = g[y * ow + xo];
                match kind {
                    PoolKind::Avg => {
                        let share = gv / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                dst[iy * xs.w + ix] += share;
                            }
                        }
                    }
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        let mut at = None;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                let v = src[iy * xs.w + ix];
                                if v > best {
                                    best = v;
                                    at = Some(iy * xs.w + ix);
                                }
                            }
                        }
                        if let Some(i) = at {
                            dst[i] += gv;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(xs, gx)
}
