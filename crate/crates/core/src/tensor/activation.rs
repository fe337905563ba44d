use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Relu,
    Silu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn apply<T: Scalar>(kind: ActKind, v: T) -> T {
    match kind {
        ActKind::Relu => v.max(T::zero()),
        ActKind::Silu => v * sigmoid(v),
        ActKind::Sigmoid => sigmoid(v),
    }
}

pub fn activate<T: Scalar>(x: &Tensor<T>, kind: ActKind) -> Tensor<T> {
    x.map(|v| apply(kind, v))
}

/// Gradient with respect to the activation input `x`.
pub fn activate_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>, kind: ActKind) -> Result<Tensor<T>> {
    super::check_same("activate_backward", x.shape(), grad_out.shape())?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let d = match kind {
                ActKind::Relu => {
                    if v > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                ActKind::Silu => {
                    let s = sigmoid(v);
                    s * (T::one() + v * (T::one() - s))
                }
                ActKind::Sigmoid => {
                    let s = sigmoid(v);
                    s * (T::one() - s)
                }
            };
            d * g
        })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Max-subtracted softmax of a vector.
pub fn softmax_vec<T: Scalar>(w: &[T]) -> Result<Vec<T>> {
    if w.is_empty() {
        return Err(Error::invalid("softmax_vec", "empty input"));
    }
    let max = w.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = w.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Vector-Jacobian product of softmax: `dw_j = p_j (g_j - sum_i p_i g_i)`.
pub fn softmax_vec_backward<T: Scalar>(probs: &[T], grad: &[T]) -> Vec<T> {
    let dot = probs.iter().zip(grad).fold(T::zero(), |a, (&p, &g)| a + p * g);
    probs.iter().zip(grad).map(|(&p, &g)| p * (g - dot)).collect()
}
