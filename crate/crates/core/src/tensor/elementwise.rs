use super::{check_same, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Elementwise sum of equally shaped tensors, accumulated in input order.
pub fn add_n<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| Error::invalid("add", "no inputs"))?;
    let mut out = (*first).clone();
    for t in &inputs[1..] {
        out.add_assign(t)?;
    }
    Ok(out)
}

/// Adds a per-channel bias of length `c`.
pub fn bias_add<T: Scalar>(x: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if bias.len() != s.c {
        return Err(Error::ShapeMismatch {
            op: "bias_add",
            lhs: s,
            rhs: Shape::new(1, bias.len(), 1, 1),
        });
    }
    let plane = s.plane();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias[(i / plane.max(1)) % s.c];
    }
    Ok(out)
}

pub fn bias_add_backward<T: Scalar>(grad_out: &Tensor<T>) -> Vec<T> {
    let s = grad_out.shape();
    let plane = s.plane();
    let mut gb = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, acc) in gb.iter_mut().enumerate() {
            let base = (n * s.c + c) * plane;
            for &g in &grad_out.data()[base..base + plane] {
                *acc += g;
            }
        }
    }
    gb
}

/// Mean over each `(n, c)` plane, giving `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let plane = s.plane();
    if plane == 0 {
        return Err(Error::invalid("global_avg_pool", format!("empty planes in {s}")));
    }
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().fold(T::zero(), |a, b| a + b) * inv)
        .collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward<T: Scalar>(x_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    check_same(
        "global_avg_pool_backward",
        Shape::new(x_shape.n, x_shape.c, 1, 1),
        grad_out.shape(),
    )?;
    let plane = x_shape.plane();
    let inv = T::one() / T::lit(plane as f64);
    let mut data = Vec::with_capacity(x_shape.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::new(x_shape, data)
}

/// `x * gate` where `gate` is `(n, c, 1, 1)` and broadcasts over the plane.
pub fn channel_gate<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_same("channel_gate", Shape::new(s.n, s.c, 1, 1), gate.shape())?;
    let plane = s.plane();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= gate.data()[i / plane];
    }
    Ok(out)
}

/// Returns `(grad_x, grad_gate)`.
pub fn channel_gate_backward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    check_same("channel_gate_backward", s, grad_out.shape())?;
    let plane = s.plane();
    let gx = channel_gate(grad_out, gate)?;
    let gg: Vec<T> = x
        .data()
        .chunks(plane)
        .zip(grad_out.data().chunks(plane))
        .map(|(xp, gp)| xp.iter().zip(gp).fold(T::zero(), |a, (&u, &v)| a + u * v))
        .collect();
    Ok((gx, Tensor::new(gate.shape(), gg)?))
}

/// `sum_i coeffs[i] * inputs[i]`, accumulated in input order.
pub fn weighted_sum<T: Scalar>(inputs: &[&Tensor<T>], coeffs: &[T]) -> Result<Tensor<T>> {
    if inputs.is_empty() || inputs.len() != coeffs.len() {
        return Err(Error::invalid(
            "weighted_sum",
            format!("{} inputs for {} coefficients", inputs.len(), coeffs.len()),
        ));
    }
    let s = inputs[0].shape();
    for t in inputs {
        check_same("weighted_sum", s, t.shape())?;
    }
    let mut out = inputs[0].scale(coeffs[0]);
    for (t, &c) in inputs.iter().zip(coeffs).skip(1) {
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += c * v;
        }
    }
    Ok(out)
}

/// Gradient of [`weighted_sum`] with respect to each coefficient: `<g, x_i>`.
pub fn weighted_sum_backward<T: Scalar>(inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Vec<T> {
    inputs
        .iter()
        .map(|t| {
            t.data()
                .iter()
                .zip(grad_out.data())
                .fold(T::zero(), |a, (&x, &g)| a + x * g)
        })
        .collect()
}

/// Fast normalized fusion coefficients `relu(w_i) / (sum_j relu(w_j) + eps)`.
pub fn fast_normalized_coeffs<T: Scalar>(w: &[T], eps: f64) -> Vec<T> {
    let r: Vec<T> = w.iter().map(|&v| v.max(T::zero())).collect();
    let denom = r.iter().copied().fold(T::zero(), |a, b| a + b) + T::lit(eps);
    r.into_iter().map(|v| v / denom).collect()
}

/// Chain rule from coefficient gradients back to raw fusion weights.
pub fn fast_normalized_backward<T: Scalar>(w: &[T], eps: f64, grad_coeffs: &[T]) -> Vec<T> {
    let r: Vec<T> = w.iter().map(|&v| v.max(T::zero())).collect();
    let denom = r.iter().copied().fold(T::zero(), |a, b| a + b) + T::lit(eps);
    // dc_i/dr_j = delta_ij / D - r_i / D^2
    let dot = r.iter().zip(grad_coeffs).fold(T::zero(), |a, (&ri, &gi)| a + ri * gi);
    w.iter()
        .zip(grad_coeffs)
        .map(|(&wj, &gj)| {
            if wj > T::zero() {
                gj / denom - dot / (denom * denom)
            } else {
                T::zero()
            }
        })
        .collect()
}

pub fn softmax_coeffs<T: Scalar>(w: &[T]) -> Result<Vec<T>> {
    super::softmax_vec(w)
}

/// Sum of all elements as a `(1, 1, 1, 1)` tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.sum())
}
