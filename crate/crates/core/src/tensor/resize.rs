use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Interpolation taps along one axis: `(i0, i1, frac)` per output index.
///
/// Half-pixel centers: `src = (dst + 0.5) * in / out - 0.5`, clamped to
/// `[0, in - 1]`.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check(x: Shape, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output size must be >= 1"));
    }
    if x.h == 0 || x.w == 0 {
        return Err(Error::invalid("bilinear_resize", format!("empty input {x}")));
    }
    Ok(())
}

/// Bilinear resize with half-pixel centers and border clamping.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    check(xs, out_h, out_w)?;
    if xs.h == out_h && xs.w == out_w {
        return Ok(x.clone());
    }
    let ty = axis_taps(xs.h, out_h);
    let tx = axis_taps(xs.w, out_w);
    let out_shape = Shape::new(xs.n, xs.c, out_h, out_w);
    let mut out = vec![T::zero(); out_shape.numel()];
    let in_plane = xs.plane();
    let xd = x.data();
    out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(idx, dst)| {
        let src = &xd[idx * in_plane..(idx + 1) * in_plane];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let ly = T::lit(fy);
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let lx = T::lit(fx);
                let v00 = src[y0 * xs.w + x0];
                let v01 = src[y0 * xs.w + x1];
                let v10 = src[y1 * xs.w + x0];
                let v11 = src[y1 * xs.w + x1];
                // lerp form keeps constant regions exact
                let top = v00 + lx * (v01 - v00);
                let bot = v10 + lx * (v11 - v10);
                dst[y * out_w + xo] = top + ly * (bot - top);
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients to the four taps.
pub fn bilinear_resize_backward<T: Scalar>(x_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    check(x_shape, gs.h, gs.w)?;
    if gs.n != x_shape.n || gs.c != x_shape.c {
        return Err(Error::ShapeMismatch {
            op: "bilinear_resize_backward",
            lhs: gs,
            rhs: x_shape,
        });
    }
    if x_shape.h == gs.h && x_shape.w == gs.w {
        return Ok(grad_out.clone());
    }
    let ty = axis_taps(x_shape.h, gs.h);
    let tx = axis_taps(x_shape.w, gs.w);
    let in_plane = x_shape.plane();
    let out_plane = gs.plane();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); x_shape.numel()];
    gx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, dst)| {
        let g = &gd[idx * out_plane..(idx + 1) * out_plane];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let ly = T::lit(fy);
            let hy = T::one() - ly;
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let lx = T::lit(fx);
                let hx = T::one() - lx;
                let gv = g[y * gs.w + xo];
                dst[y0 * x_shape.w + x0] += hy * hx * gv;
                dst[y0 * x_shape.w + x1] += hy * lx * gv;
                dst[y1 * x_shape.w + x0] += ly * hx * gv;
                dst[y1 * x_shape.w + x1] += ly * lx * gv;
            }
        }
    });
    Tensor::new(x_shape, gx)
}

/// Nearest-neighbour resize for label maps (`h * w` row-major), same
/// half-pixel convention. Never produces a value absent from the input.
pub fn nearest_resize_labels(labels: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let pick = |d: usize, in_len: usize, out_len: usize| -> usize {
        let src = ((d as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
        src.min(in_len - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, h, out_h);
        for x in 0..out_w {
            out.push(labels[sy * w + pick(x, w, out_w)]);
        }
    }
    out
}
